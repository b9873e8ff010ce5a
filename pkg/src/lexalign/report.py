"""Report generation: one directory of tables, charts, and intermediates.

``run_alignment_report`` turns a declarative configuration (embedding
files, a feature table, behavioral judgments) into three tables and two
SVG charts:

* an alignment table crossing each embedding source with the behavioral
  dissimilarity matrix and the single-feature reference matrices,
* a partial-correlation table relating each target matrix to each
  lexical feature while controlling the remaining features,
* an ablation table comparing each source's alignment before and after
  regressing one feature out of its vectors.

Every number in the tables is recomputable from intermediates written
alongside them (``rdms/*.csv``, ``fits/*.json``), and a rerun with the
same configuration reproduces every output byte for byte: nothing in
this module consults the clock, the filesystem order, or any
unseeded random source.
"""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from .ablation import AblationError, ablation_pipeline, save_ridge_fit, write_ablation_reports
from .ingest import (
    FeatureTable,
    IngestError,
    compute_old20,
    load_feature_table,
    load_judgments,
    load_lexicon,
    load_ratings,
    mean_ratings,
    nfc,
    parse_embedding_file,
)
from .rdm import RDM, RDMError, behavioral_rdm, embedding_rdm, feature_rdm, write_rdm
from .stats import StatsError, partial_spearman, rsa

ABLATION_FEATURES = ("concreteness", "frequency", "length", "old20")

# table column order: behavioral first, then references from ratings and
# the feature table
ALIGNMENT_COLUMNS = ("behavioral", "rated_concreteness") + ABLATION_FEATURES


class ReportError(Exception):
    """A report could not be produced from the given configuration."""


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a report run needs, with all paths already resolved."""

    embeddings: dict[str, Path]
    features: Path
    judgments: Path
    output_dir: Path
    lexicon: Path | None = None
    ratings: Path | None = None
    train_words: Path | None = None
    seed: int = 0
    alpha_grid: tuple[float, ...] | None = None
    k_folds: int = 5
    n_permutations: int = 1000
    extra_ablation_features: tuple[str, ...] = ()

    REQUIRED_KEYS = ("embeddings", "features", "judgments", "output_dir")

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        """Parse a config file; relative paths are taken relative to it."""
        path = Path(path)

        def reject_duplicates(pairs):
            keys = [k for k, _ in pairs]
            dupes = sorted({k for k in keys if keys.count(k) > 1})
            if dupes:
                raise ReportError(f"duplicate keys in {path}: {', '.join(dupes)}")
            return dict(pairs)

        try:
            raw = json.loads(path.read_text(encoding="utf-8"), object_pairs_hook=reject_duplicates)
        except OSError as err:
            raise ReportError(f"cannot read config {path}: {err}") from err
        except json.JSONDecodeError as err:
            raise ReportError(f"config {path} is not valid JSON: {err}") from err
        if not isinstance(raw, dict):
            raise ReportError(f"config {path} must be a JSON object")

        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ReportError(f"unknown config keys: {', '.join(unknown)}")
        missing = sorted(k for k in cls.REQUIRED_KEYS if k not in raw)
        if missing:
            raise ReportError(f"missing config keys: {', '.join(missing)}")

        base = path.parent

        def as_path(value, key):
            if not isinstance(value, str) or not value:
                raise ReportError(f"config key {key!r} must be a non-empty path string")
            return base / value

        emb = raw["embeddings"]
        if not isinstance(emb, dict) or not emb:
            raise ReportError("config key 'embeddings' must map source names to paths")
        kwargs = {
            "embeddings": {name: as_path(p, f"embeddings.{name}") for name, p in emb.items()},
            "features": as_path(raw["features"], "features"),
            "judgments": as_path(raw["judgments"], "judgments"),
            "output_dir": as_path(raw["output_dir"], "output_dir"),
        }
        for key in ("lexicon", "ratings", "train_words"):
            if raw.get(key) is not None:
                kwargs[key] = as_path(raw[key], key)
        for key in ("seed", "k_folds", "n_permutations"):
            if key in raw:
                if not isinstance(raw[key], int) or isinstance(raw[key], bool):
                    raise ReportError(f"config key {key!r} must be an integer")
                kwargs[key] = raw[key]
        if raw.get("alpha_grid") is not None:
            grid = raw["alpha_grid"]
            if not isinstance(grid, list) or not all(
                isinstance(a, (int, float)) and not isinstance(a, bool) for a in grid
            ):
                raise ReportError("config key 'alpha_grid' must be a list of numbers")
            kwargs["alpha_grid"] = tuple(float(a) for a in grid)
        if raw.get("extra_ablation_features") is not None:
            extras = raw["extra_ablation_features"]
            if not isinstance(extras, list) or not all(isinstance(e, str) for e in extras):
                raise ReportError("config key 'extra_ablation_features' must be a list of names")
            kwargs["extra_ablation_features"] = tuple(extras)
        return cls(**kwargs)


def validate_config(config: PipelineConfig) -> list[str]:
    """Collect every structural problem in one pass; never raises, never
    touches anything but the named input paths."""
    errors: list[str] = []
    if not config.embeddings:
        errors.append("no embedding sources configured")
    for name, path in config.embeddings.items():
        if not name.strip():
            errors.append("embedding source names must be non-empty")
        if not path.is_file():
            errors.append(f"embedding file for source {name!r} not found: {path}")
    slugs: dict[str, str] = {}
    for name in config.embeddings:
        slug = _slug(name)
        if slug in slugs:
            errors.append(
                f"source names {slugs[slug]!r} and {name!r} collide as filenames ({slug})"
            )
        slugs[slug] = name
    for key in ("features", "judgments"):
        path = getattr(config, key)
        if not path.is_file():
            errors.append(f"{key} file not found: {path}")
    for key in ("lexicon", "ratings", "train_words"):
        path = getattr(config, key)
        if path is not None and not path.is_file():
            errors.append(f"{key} file not found: {path}")
    if config.output_dir.exists() and not config.output_dir.is_dir():
        errors.append(f"output_dir is not a directory: {config.output_dir}")
    if config.k_folds < 2:
        errors.append(f"k_folds must be at least 2, got {config.k_folds}")
    if config.n_permutations < 1:
        errors.append(f"n_permutations must be positive, got {config.n_permutations}")
    if config.alpha_grid is not None:
        if len(config.alpha_grid) == 0:
            errors.append("alpha_grid must not be empty")
        elif any(not math.isfinite(a) or a < 0 for a in config.alpha_grid):
            errors.append("alpha_grid entries must be finite and non-negative")
    for name in config.extra_ablation_features:
        if name in ABLATION_FEATURES:
            errors.append(f"extra ablation feature {name!r} is already built in")
    return errors


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name)


def _load_inputs(config: PipelineConfig):
    with open(config.features, encoding="utf-8") as fh:
        features = load_feature_table(fh)
    with open(config.judgments, encoding="utf-8") as fh:
        judgments = load_judgments(fh)
    if not judgments:
        raise ReportError(f"no judgments in {config.judgments}")
    embeddings = {}
    for name, path in config.embeddings.items():
        with open(path, encoding="utf-8") as fh:
            embeddings[name] = parse_embedding_file(fh, source_name=name)
    lexicon = None
    if config.lexicon is not None:
        with open(config.lexicon, encoding="utf-8") as fh:
            lexicon = load_lexicon(fh)
    ratings = None
    if config.ratings is not None:
        with open(config.ratings, encoding="utf-8") as fh:
            ratings = load_ratings(fh)
    return features, judgments, embeddings, lexicon, ratings


def _lenient_feature_values(
    feature_name: str, words: Sequence[str], features: FeatureTable, lexicon
) -> dict[str, float]:
    """One feature column over whichever of `words` it can cover: table
    values win, then the two derivable features are computed (length from
    the word itself, the orthographic-neighborhood distance from the
    lexicon)."""
    column = features.features.get(feature_name, {})
    out: dict[str, float] = {}
    for word in words:
        if word in column:
            out[word] = column[word]
        elif feature_name == "length":
            out[word] = float(len(word))
        elif feature_name == "old20" and lexicon is not None:
            out[word] = compute_old20(word, lexicon)
    return out


def _feature_values(
    feature_name: str, words: Sequence[str], features: FeatureTable, lexicon
) -> dict[str, float]:
    """Like `_lenient_feature_values` but every word must be covered."""
    out = _lenient_feature_values(feature_name, words, features, lexicon)
    missing = [w for w in words if w not in out]
    if missing:
        hint = "; provide a lexicon to compute it" if feature_name == "old20" else ""
        raise ReportError(
            f"feature {feature_name!r} has no value for {missing[0]!r} "
            f"(and {len(missing) - 1} more){hint}"
        )
    return out


def _stimulus_words(judgments) -> list[str]:
    return sorted({word for j in judgments for word in j.triplet})


def _default_train_words(embedding, feature_columns, stimulus: set[str]) -> list[str]:
    covered = set(embedding.words) - stimulus
    for column in feature_columns.values():
        covered &= set(column)
    return sorted(covered)


def _read_word_list(path: Path) -> list[str]:
    words = []
    for line in path.read_text(encoding="utf-8").splitlines():
        word = nfc(line.strip())
        if word and not word.startswith("#"):
            words.append(word)
    if not words:
        raise ReportError(f"train word file {path} is empty")
    return words


def _csv_cell(value: float) -> str:
    return f"{value:.17g}"


def _write_alignment_table(path: Path, rows, columns) -> None:
    header = ["model_source"]
    for column in columns:
        header += [f"{column}_rho", f"{column}_p", f"{column}_stars"]
    lines = [",".join(header)]
    for source, cells in rows:
        line = [source]
        for column in columns:
            result = cells[column]
            line += [_csv_cell(result.rho), _csv_cell(result.p_value), significance_stars(result.p_value)]
        lines.append(",".join(line))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_partial_table(path: Path, rows) -> None:
    lines = ["target,feature,rho,p_value,stars"]
    for target, feature_name, result in rows:
        lines.append(
            ",".join(
                [
                    target,
                    feature_name,
                    _csv_cell(result.rho),
                    _csv_cell(result.p_value),
                    significance_stars(result.p_value),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# fixed palette so chart bytes never depend on anything but the data
_PALETTE = ("#4878a8", "#e49444", "#6a9f58", "#d1605e", "#857aab", "#bab0ac")


def grouped_bar_svg(
    title: str,
    group_labels: Sequence[str],
    series: Sequence[tuple[str, Sequence[float]]],
    *,
    y_label: str,
    annotations: Mapping[tuple[int, int], str] | None = None,
) -> str:
    """A self-contained grouped bar chart; (series, group) annotations are
    drawn above the bar. Deterministic: same inputs, same bytes."""
    if not group_labels or not series:
        raise ReportError("chart needs at least one group and one series")
    for name, values in series:
        if len(values) != len(group_labels):
            raise ReportError(f"series {name!r} has {len(values)} values for {len(group_labels)} groups")
    annotations = annotations or {}

    lo = min(0.0, min(v for _, vs in series for v in vs))
    hi = max(0.0, max(v for _, vs in series for v in vs))
    if hi == lo:
        hi = lo + 1.0
    span = (hi - lo) * 1.15

    margin_left, margin_top, margin_bottom = 64.0, 48.0, 72.0
    plot_h = 300.0
    bar_w = 22.0
    gap = 28.0
    group_w = bar_w * len(series) + gap
    plot_w = group_w * len(group_labels)
    width = margin_left + plot_w + 24.0
    height = margin_top + plot_h + margin_bottom + 24.0 * ((len(series) + 3) // 4)

    def x_of(g: int, s: int) -> float:
        return margin_left + g * group_w + gap / 2 + s * bar_w

    def y_of(value: float) -> float:
        return margin_top + plot_h * (1.0 - (value - lo) / span)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.0f} {height:.0f}" font-family="sans-serif">',
        f'<title>{escape(title)}</title>',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{margin_left:.1f}" y="24" font-size="16" fill="#222">{escape(title)}</text>',
        f'<text x="16" y="{margin_top + plot_h / 2:.1f}" font-size="12" fill="#222" '
        f'transform="rotate(-90 16 {margin_top + plot_h / 2:.1f})" text-anchor="middle">'
        f"{escape(y_label)}</text>",
    ]
    # horizontal grid at ticks, zero line solid
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        value = lo + span * frac
        y = y_of(value)
        parts.append(
            f'<line x1="{margin_left:.1f}" y1="{y:.1f}" x2="{margin_left + plot_w:.1f}" '
            f'y2="{y:.1f}" stroke="#ddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{margin_left - 6:.1f}" y="{y + 4:.1f}" font-size="10" fill="#555" '
            f'text-anchor="end">{value:.2f}</text>'
        )
    zero_y = y_of(0.0)
    parts.append(
        f'<line x1="{margin_left:.1f}" y1="{zero_y:.1f}" x2="{margin_left + plot_w:.1f}" '
        f'y2="{zero_y:.1f}" stroke="#888" stroke-width="1"/>'
    )
    for g, label in enumerate(group_labels):
        cx = margin_left + g * group_w + group_w / 2
        parts.append(
            f'<text x="{cx:.1f}" y="{margin_top + plot_h + 18:.1f}" font-size="11" '
            f'fill="#222" text-anchor="middle">{escape(label)}</text>'
        )
        for s, (_, values) in enumerate(series):
            value = values[g]
            x = x_of(g, s)
            top = min(y_of(value), zero_y)
            h = abs(y_of(value) - zero_y)
            color = _PALETTE[s % len(_PALETTE)]
            parts.append(
                f'<rect x="{x:.1f}" y="{top:.1f}" width="{bar_w - 4:.1f}" height="{h:.1f}" '
                f'fill="{color}"/>'
            )
            note = annotations.get((s, g), "")
            if note:
                parts.append(
                    f'<text x="{x + (bar_w - 4) / 2:.1f}" y="{top - 4:.1f}" font-size="10" '
                    f'fill="#222" text-anchor="middle">{escape(note)}</text>'
                )
    # legend below the x labels, four entries per row
    for s, (name, _) in enumerate(series):
        lx = margin_left + (s % 4) * 150.0
        ly = margin_top + plot_h + 44.0 + (s // 4) * 20.0
        color = _PALETTE[s % len(_PALETTE)]
        parts.append(f'<rect x="{lx:.1f}" y="{ly - 9:.1f}" width="10" height="10" fill="{color}"/>')
        parts.append(
            f'<text x="{lx + 14:.1f}" y="{ly:.1f}" font-size="11" fill="#222">{escape(name)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def run_alignment_report(config: PipelineConfig) -> dict:
    """Produce the full report bundle under ``config.output_dir`` and
    return the manifest that was written there."""
    problems = validate_config(config)
    if problems:
        raise ReportError("invalid configuration: " + "; ".join(problems))

    try:
        features, judgments, embeddings, lexicon, ratings = _load_inputs(config)
    except (IngestError, OSError) as err:
        raise ReportError(f"cannot load inputs: {err}") from err

    words = _stimulus_words(judgments)
    try:
        behavioral = behavioral_rdm(judgments, words)
    except RDMError as err:
        raise ReportError(f"behavioral matrix: {err}") from err

    ablation_features = ABLATION_FEATURES + config.extra_ablation_features

    # reference matrices over the stimulus words
    reference_rdms: dict[str, RDM] = {"behavioral": behavioral}
    feature_rdms: dict[str, RDM] = {}
    stimulus_columns: dict[str, dict[str, float]] = {}
    for name in ablation_features:
        stimulus_columns[name] = _feature_values(name, words, features, lexicon)
        feature_rdms[name] = feature_rdm(stimulus_columns[name], words)
        reference_rdms[name] = feature_rdms[name]
    if ratings is not None:
        means = mean_ratings(ratings)
        missing = [w for w in words if w not in means]
        if missing:
            raise ReportError(f"no rating for stimulus word {missing[0]!r}")
        reference_rdms["rated_concreteness"] = feature_rdm(
            {w: means[w] for w in words}, words
        )
    columns = [c for c in ALIGNMENT_COLUMNS if c in reference_rdms] + list(
        config.extra_ablation_features
    )

    model_rdms = {}
    for name, table in embeddings.items():
        try:
            model_rdms[name] = embedding_rdm(table, words)
        except KeyError as err:
            raise ReportError(f"embedding source {name!r} is missing stimulus words: {err}") from err

    # (a) alignment table
    alignment_rows = []
    for name in embeddings:
        cells = {}
        for column in columns:
            try:
                cells[column] = rsa(reference_rdms[column], model_rdms[name])
            except StatsError as err:
                raise ReportError(f"alignment of {name!r} with {column!r}: {err}") from err
        alignment_rows.append((name, cells))

    # (b) partial correlations: every target against every feature,
    # controlling the remaining features
    partial_rows = []
    targets = [("behavioral", behavioral)] + [(n, model_rdms[n]) for n in embeddings]
    for target_name, target in targets:
        for feature_name in ablation_features:
            controls = [feature_rdms[f] for f in ablation_features if f != feature_name]
            try:
                result = partial_spearman(target, feature_rdms[feature_name], controls)
            except StatsError as err:
                raise ReportError(
                    f"partial correlation of {target_name!r} with {feature_name!r}: {err}"
                ) from err
            partial_rows.append((target_name, feature_name, result))

    # (c) ablations, one cell per source and feature; cells are
    # independent so they run on a small thread pool, assembled in order
    if config.train_words is not None:
        pinned = _read_word_list(config.train_words)
    else:
        pinned = None
    feature_columns_all = {}
    train_words_by_source = {}
    for name, table in embeddings.items():
        if pinned is not None:
            # pinned words must all be usable, so resolve them strictly
            candidates = pinned
            columns_over = {
                feature_name: _feature_values(feature_name, candidates, features, lexicon)
                for feature_name in ablation_features
            }
            train = list(pinned)
        else:
            # otherwise train on every non-stimulus word the source and
            # the feature columns jointly cover
            candidates = sorted(set(table.words) - set(words))
            columns_over = {
                feature_name: _lenient_feature_values(feature_name, candidates, features, lexicon)
                for feature_name in ablation_features
            }
            train = _default_train_words(table, columns_over, set(words))
            if not train:
                hint = (
                    "; old20 needs a lexicon or a feature column"
                    if lexicon is None and "old20" in ablation_features
                    else ""
                )
                raise ReportError(
                    f"no usable train words for source {name!r} after removing stimuli{hint}"
                )
        for feature_name in ablation_features:
            columns_over[feature_name] = dict(columns_over[feature_name])
            columns_over[feature_name].update(stimulus_columns[feature_name])
        feature_columns_all[name] = columns_over
        train_words_by_source[name] = train

    def run_cell(args):
        source, feature_name = args
        table = FeatureTable(features=feature_columns_all[source])
        try:
            return ablation_pipeline(
                embeddings[source],
                behavioral,
                table,
                feature_name,
                train_words_by_source[source],
                words,
                alpha_grid=config.alpha_grid,
                k_folds=config.k_folds,
                seed=config.seed,
            )
        except (AblationError, StatsError) as err:
            raise ReportError(f"ablation of {feature_name!r} from {source!r}: {err}") from err

    cells = [(source, feature_name) for source in embeddings for feature_name in ablation_features]
    with ThreadPoolExecutor(max_workers=min(4, len(cells))) as pool:
        ablation_reports = list(pool.map(run_cell, cells))

    # write the bundle
    out = config.output_dir
    (out / "rdms").mkdir(parents=True, exist_ok=True)
    (out / "fits").mkdir(exist_ok=True)
    (out / "charts").mkdir(exist_ok=True)

    rdm_files = {}
    for label, rdm in [("behavioral", behavioral)] + [
        (f"feature_{n}", feature_rdms[n]) for n in ablation_features
    ] + (
        [("feature_rated_concreteness", reference_rdms["rated_concreteness"])]
        if "rated_concreteness" in reference_rdms
        else []
    ) + [
        (f"model_{_slug(n)}", model_rdms[n]) for n in embeddings
    ]:
        rel = f"rdms/{label}.csv"
        with open(out / rel, "w", encoding="utf-8") as fh:
            write_rdm(rdm, fh)
        rdm_files[label] = rel

    fit_files = {}
    for report in ablation_reports:
        rel = f"fits/{_slug(report.model_source)}__{_slug(report.feature_name)}.json"
        with open(out / rel, "w", encoding="utf-8") as fh:
            save_ridge_fit(report.fit, fh)
        fit_files[f"{report.model_source}:{report.feature_name}"] = rel

    _write_alignment_table(out / "alignment_table.csv", alignment_rows, columns)
    _write_partial_table(out / "partial_correlations.csv", partial_rows)
    with open(out / "ablation_report.csv", "w", encoding="utf-8") as fh:
        write_ablation_reports(ablation_reports, fh)

    partial_by_target: dict[str, list[float]] = {}
    partial_stars = {}
    target_names = [t for t, _ in targets]
    for target_name, feature_name, result in partial_rows:
        partial_by_target.setdefault(target_name, []).append(result.rho)
        stars = significance_stars(result.p_value)
        if stars:
            cell = (ablation_features.index(feature_name), target_names.index(target_name))
            partial_stars[cell] = stars
    partial_svg = grouped_bar_svg(
        "Partial correlation with each feature (controlling the rest)",
        target_names,
        [
            (feature_name, [partial_by_target[t][i] for t in target_names])
            for i, feature_name in enumerate(ablation_features)
        ],
        y_label="partial Spearman rho",
        annotations=partial_stars,
    )
    (out / "charts/partial_correlations.svg").write_text(partial_svg, encoding="utf-8")

    source_names = list(embeddings)
    by_cell = {(r.model_source, r.feature_name): r for r in ablation_reports}
    base_values = [by_cell[(s, ablation_features[0])].base_rho for s in source_names]
    ablation_series = [("base", base_values)]
    ablation_stars = {}
    for i, feature_name in enumerate(ablation_features):
        values = [by_cell[(s, feature_name)].ablated_rho for s in source_names]
        ablation_series.append((f"without {feature_name}", values))
        for g, s in enumerate(source_names):
            stars = significance_stars(by_cell[(s, feature_name)].williams.p_value)
            if stars:
                ablation_stars[(i + 1, g)] = stars
    ablation_svg = grouped_bar_svg(
        "Alignment with behavior before and after feature removal",
        source_names,
        ablation_series,
        y_label="Spearman rho",
        annotations=ablation_stars,
    )
    (out / "charts/ablation.svg").write_text(ablation_svg, encoding="utf-8")

    manifest = {
        "seed": config.seed,
        "k_folds": config.k_folds,
        "n_permutations": config.n_permutations,
        "alpha_grid": list(config.alpha_grid) if config.alpha_grid is not None else None,
        "inputs": {
            "embeddings": {n: str(p) for n, p in config.embeddings.items()},
            "features": str(config.features),
            "judgments": str(config.judgments),
            "lexicon": str(config.lexicon) if config.lexicon else None,
            "ratings": str(config.ratings) if config.ratings else None,
            "train_words": str(config.train_words) if config.train_words else None,
        },
        "stimulus_words": words,
        "model_sources": source_names,
        "ablation_features": list(ablation_features),
        "train_sizes": {n: len(train_words_by_source[n]) for n in source_names},
        "tables": {
            "alignment": "alignment_table.csv",
            "partial_correlations": "partial_correlations.csv",
            "ablation": "ablation_report.csv",
        },
        "charts": {
            "partial_correlations": "charts/partial_correlations.svg",
            "ablation": "charts/ablation.svg",
        },
        "intermediates": {"rdms": rdm_files, "fits": fit_files},
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=False) + "\n", encoding="utf-8"
    )
    return manifest
