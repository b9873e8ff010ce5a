"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 on success, 1 when arguments, configuration, or input
files fail validation, 2 when a computation fails after valid inputs.
Tabular results go to ``--out`` (stdout when omitted); statistics
subcommands print one JSON object so callers can parse results without
scraping text.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import __version__
from .ablation import AblationError, ablation_pipeline, save_ridge_fit, write_ablation_reports
from .ingest import (
    IngestError,
    compute_old20,
    load_feature_table,
    load_judgments,
    load_lexicon,
    nfc,
    parse_embedding_file,
    write_embedding_file,
)
from .rdm import RDMError, behavioral_rdm, embedding_rdm, feature_rdm, read_rdm, write_rdm
from .report import (
    PipelineConfig,
    ReportError,
    run_alignment_report,
    validate_config,
)
from .stats import StatsError, partial_spearman, rsa
from .stimuli import (
    SelectionConfig,
    StimulusError,
    build_affinity,
    centroid_distances,
    cluster,
    generate_triplets,
    pick_target_cluster,
    read_stimulus_set,
    schedule_triplets,
    select_stimuli,
    write_schedule,
    write_stimulus_set,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class CliError(Exception):
    def __init__(self, message: str, exit_code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.exit_code = exit_code


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; bad usage is a validation
    # failure here, so route it through CliError instead
    def error(self, message):
        raise CliError(f"{self.prog}: {message}", EXIT_VALIDATION)


def _open_input(path: str, loader, what: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return loader(fh)
    except OSError as err:
        raise CliError(f"cannot read {what} {path}: {err.strerror}", EXIT_VALIDATION) from err
    except IngestError as err:
        raise CliError(f"invalid {what} {path}: {err}", EXIT_VALIDATION) from err
    except RDMError as err:
        raise CliError(f"invalid {what} {path}: {err}", EXIT_VALIDATION) from err


def _read_words(path: str) -> list[str]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as err:
        raise CliError(f"cannot read word list {path}: {err.strerror}") from err
    words = [nfc(line.strip()) for line in lines if line.strip() and not line.startswith("#")]
    if not words:
        raise CliError(f"word list {path} is empty")
    return words


def _out_stream(path: str | None):
    if path is None:
        return sys.stdout, False
    try:
        return open(path, "w", encoding="utf-8"), True
    except OSError as err:
        raise CliError(f"cannot write {path}: {err.strerror}", EXIT_RUNTIME) from err


def _write_text(path: str | None, text: str) -> None:
    stream, owned = _out_stream(path)
    try:
        stream.write(text)
    finally:
        if owned:
            stream.close()


def _sidecar(path: str, payload: dict) -> None:
    side = Path(path).with_suffix(Path(path).suffix + ".manifest.json")
    side.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _cmd_ingest(args) -> int:
    table = _open_input(
        args.embeddings,
        lambda fh: parse_embedding_file(
            fh, merge_duplicates=args.merge_duplicates, source_name=args.source
        ),
        "embedding file",
    )
    if args.out:
        stream, owned = _out_stream(args.out)
        try:
            write_embedding_file(table, stream)
        finally:
            if owned:
                stream.close()
    print(f"{table.source_name}: {len(table)} words, {table.dim} dimensions")
    return EXIT_OK


def _cmd_old20(args) -> int:
    lexicon = _open_input(args.lexicon, load_lexicon, "lexicon")
    words = _read_words(args.words) if args.words else sorted(lexicon.entries)
    try:
        rows = [(w, compute_old20(w, lexicon, n_neighbors=args.neighbors)) for w in words]
    except (IngestError, ValueError) as err:
        raise CliError(str(err), EXIT_RUNTIME) from err
    text = "word,old20\n" + "".join(f"{w},{v:.17g}\n" for w, v in rows)
    _write_text(args.out, text)
    return EXIT_OK


def _cmd_select_stimuli(args) -> int:
    table = _open_input(args.embeddings, parse_embedding_file, "embedding file")
    features = _open_input(args.features, load_feature_table, "feature table")
    config = SelectionConfig(group_size=args.group_size)
    try:
        covered = [
            w
            for w in table.words
            if all(w in features.features.get(k, {}) for k in ("concreteness", "frequency", "length", "old20"))
        ]
        affinity = build_affinity(table, covered)
        model = cluster(affinity, k=args.clusters, seed=args.seed)
        target = pick_target_cluster(model, features.features["concreteness"])
        members = model.members(target)
        distances = centroid_distances(model, target)
        chosen = select_stimuli(
            members, features, config, seed=args.seed, centroid_distance=distances
        )
    except (StimulusError, KeyError) as err:
        raise CliError(f"stimulus selection failed: {err}", EXIT_RUNTIME) from err
    stream, owned = _out_stream(args.out)
    try:
        write_stimulus_set(chosen, stream)
    finally:
        if owned:
            stream.close()
    if args.out:
        _sidecar(
            args.out,
            {
                "seed": args.seed,
                "clusters": args.clusters,
                "target_cluster": target,
                "cluster_size": len(members),
                "group_size": args.group_size,
            },
        )
    return EXIT_OK


def _cmd_triplets(args) -> int:
    stimuli = _open_input(args.stimuli, read_stimulus_set, "stimulus set")
    try:
        triples = generate_triplets(stimuli.words())
    except StimulusError as err:
        raise CliError(str(err), EXIT_RUNTIME) from err
    text = "word_a,word_b,word_c\n" + "".join(f"{a},{b},{c}\n" for a, b, c in triples)
    _write_text(args.out, text)
    return EXIT_OK


def _cmd_schedule(args) -> int:
    stimuli = _open_input(args.stimuli, read_stimulus_set, "stimulus set")
    try:
        schedule = schedule_triplets(
            generate_triplets(stimuli.words()), args.participants, seed=args.seed
        )
    except StimulusError as err:
        raise CliError(str(err), EXIT_RUNTIME) from err
    stream, owned = _out_stream(args.out)
    try:
        write_schedule(schedule, stream)
    finally:
        if owned:
            stream.close()
    if args.out:
        _sidecar(
            args.out,
            {
                "seed": args.seed,
                "n_participants": args.participants,
                "n_triplets": len(schedule.all_triplets()),
            },
        )
    return EXIT_OK


def _cmd_serve(args) -> int:
    from .service import ServiceConfig, StudyError, create_app, study_from_config

    try:
        config = ServiceConfig.from_json(args.config)
    except (OSError, ValueError) as err:
        raise CliError(f"invalid service config {args.config}: {err}") from err
    config = dataclasses.replace(
        config,
        host=args.host or config.host,
        port=args.port or config.port,
    )
    try:
        study = study_from_config(config)
    except (OSError, IngestError, StimulusError, StudyError) as err:
        raise CliError(f"cannot start study: {err}", EXIT_RUNTIME) from err
    import uvicorn

    uvicorn.run(create_app(study), host=config.host, port=config.port, log_level="info")
    return EXIT_OK


def _cmd_rdm(args) -> int:
    if args.kind == "embedding":
        if not args.embeddings or not args.words:
            raise CliError("rdm --kind embedding needs --embeddings and --words")
        table = _open_input(args.embeddings, parse_embedding_file, "embedding file")
        words = _read_words(args.words)
        try:
            rdm = embedding_rdm(table, words)
        except (KeyError, RDMError) as err:
            raise CliError(str(err), EXIT_RUNTIME) from err
    elif args.kind == "feature":
        if not args.features or not args.feature_name or not args.words:
            raise CliError("rdm --kind feature needs --features, --feature-name and --words")
        features = _open_input(args.features, load_feature_table, "feature table")
        words = _read_words(args.words)
        column = features.features.get(args.feature_name)
        if column is None:
            raise CliError(f"feature table has no column {args.feature_name!r}")
        try:
            rdm = feature_rdm(column, words)
        except (KeyError, RDMError) as err:
            raise CliError(str(err), EXIT_RUNTIME) from err
    else:
        if not args.judgments:
            raise CliError("rdm --kind behavioral needs --judgments")
        judgments = _open_input(args.judgments, load_judgments, "judgments file")
        words = (
            _read_words(args.words)
            if args.words
            else sorted({w for j in judgments for w in j.triplet})
        )
        try:
            rdm = behavioral_rdm(judgments, words)
        except RDMError as err:
            raise CliError(str(err), EXIT_RUNTIME) from err
    stream, owned = _out_stream(args.out)
    try:
        write_rdm(rdm, stream)
    finally:
        if owned:
            stream.close()
    return EXIT_OK


def _cmd_rsa(args) -> int:
    target = _open_input(args.target, read_rdm, "target matrix")
    model = _open_input(args.model, read_rdm, "model matrix")
    try:
        result = rsa(target, model, method=args.method, n_perm=args.n_perm, seed=args.seed)
    except StatsError as err:
        raise CliError(str(err), EXIT_RUNTIME) from err
    print(json.dumps(dataclasses.asdict(result)))
    return EXIT_OK


def _cmd_partial(args) -> int:
    target = _open_input(args.target, read_rdm, "target matrix")
    feature = _open_input(args.feature, read_rdm, "feature matrix")
    controls = [_open_input(p, read_rdm, "control matrix") for p in args.control or []]
    try:
        result = partial_spearman(target, feature, controls)
    except StatsError as err:
        raise CliError(str(err), EXIT_RUNTIME) from err
    print(json.dumps(dataclasses.asdict(result)))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    table = _open_input(args.embeddings, parse_embedding_file, "embedding file")
    features = _open_input(args.features, load_feature_table, "feature table")
    behavioral = _open_input(args.behavioral, read_rdm, "behavioral matrix")
    train = _read_words(args.train)
    try:
        report = ablation_pipeline(
            table,
            behavioral,
            features,
            args.feature_name,
            train,
            list(behavioral.labels),
            alpha_grid=[float(a) for a in args.alpha_grid.split(",")] if args.alpha_grid else None,
            k_folds=args.k_folds,
            seed=args.seed,
        )
    except (AblationError, StatsError, ValueError) as err:
        raise CliError(str(err), EXIT_RUNTIME) from err
    stream, owned = _out_stream(args.out)
    try:
        write_ablation_reports([report], stream)
    finally:
        if owned:
            stream.close()
    if args.fit_out:
        with open(args.fit_out, "w", encoding="utf-8") as fh:
            save_ridge_fit(report.fit, fh)
    return EXIT_OK


def _pipeline_config(args) -> PipelineConfig:
    try:
        config = PipelineConfig.from_json(args.config)
    except ReportError as err:
        raise CliError(str(err), EXIT_VALIDATION) from err
    overrides = {}
    for key in ("features", "judgments", "lexicon", "ratings", "output_dir", "train_words"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = Path(value)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return dataclasses.replace(config, **overrides) if overrides else config


def _cmd_report(args) -> int:
    config = _pipeline_config(args)
    problems = validate_config(config)
    if problems:
        for problem in problems:
            print(problem, file=sys.stderr)
        return EXIT_VALIDATION
    try:
        manifest = run_alignment_report(config)
    except ReportError as err:
        raise CliError(str(err), EXIT_RUNTIME) from err
    print(json.dumps({"output_dir": str(config.output_dir), "tables": manifest["tables"]}))
    return EXIT_OK


def _cmd_validate(args) -> int:
    config = _pipeline_config(args)
    problems = validate_config(config)
    if problems:
        for problem in problems:
            print(problem, file=sys.stderr)
        return EXIT_VALIDATION
    print("ok")
    return EXIT_OK


def _build_parser() -> _Parser:
    parser = _Parser(prog="lexalign", description=__doc__)
    parser.add_argument("--version", action="version", version=f"lexalign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate and normalize an embedding file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--source", default="embedding")
    p.add_argument("--merge-duplicates", action="store_true")
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_ingest)

    p = sub.add_parser("old20", help="orthographic neighborhood distances")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--words", help="probe list, one word per line (default: whole lexicon)")
    p.add_argument("--neighbors", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_old20)

    p = sub.add_parser("select-stimuli", help="cluster the vocabulary and pick the stimulus groups")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_select_stimuli)

    p = sub.add_parser("triplets", help="every three-word combination of a stimulus set")
    p.add_argument("--stimuli", required=True)
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_triplets)

    p = sub.add_parser("schedule", help="split the triplets into per-participant blocks")
    p.add_argument("--stimuli", required=True)
    p.add_argument("--participants", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_schedule)

    p = sub.add_parser("serve", help="run the experiment HTTP service")
    p.add_argument("--config", required=True)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(handler=_cmd_serve)

    p = sub.add_parser("rdm", help="build a dissimilarity matrix")
    p.add_argument("--kind", choices=("embedding", "feature", "behavioral"), required=True)
    p.add_argument("--embeddings")
    p.add_argument("--features")
    p.add_argument("--feature-name")
    p.add_argument("--judgments")
    p.add_argument("--words")
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_rdm)

    p = sub.add_parser("rsa", help="rank correlation between two matrices")
    p.add_argument("--target", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=("analytic", "permutation"), default="analytic")
    p.add_argument("--n-perm", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_rsa)

    p = sub.add_parser("partial", help="partial rank correlation with control matrices")
    p.add_argument("--target", required=True)
    p.add_argument("--feature", required=True)
    p.add_argument("--control", action="append")
    p.set_defaults(handler=_cmd_partial)

    p = sub.add_parser("ablate", help="remove a feature from vectors and re-test alignment")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--behavioral", required=True)
    p.add_argument("--feature-name", required=True)
    p.add_argument("--train", required=True, help="train word list, one per line")
    p.add_argument("--alpha-grid", help="comma-separated grid")
    p.add_argument("--k-folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--fit-out")
    p.set_defaults(handler=_cmd_ablate)

    p = sub.add_parser("report", help="full alignment report bundle")
    p.add_argument("--config", required=True)
    for flag in ("--features", "--judgments", "--lexicon", "--ratings", "--train-words", "--output-dir"):
        p.add_argument(flag)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=_cmd_report)

    p = sub.add_parser("validate", help="check a report configuration without running it")
    p.add_argument("--config", required=True)
    for flag in ("--features", "--judgments", "--lexicon", "--ratings", "--train-words", "--output-dir"):
        p.add_argument(flag)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=_cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as err:
        print(str(err), file=sys.stderr)
        return err.exit_code
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except CliError as err:
        print(str(err), file=sys.stderr)
        return err.exit_code
    except BrokenPipeError:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
