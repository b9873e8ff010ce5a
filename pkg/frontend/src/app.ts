/** DOM layer: renders the session screens and runs the trial loop.
 *
 * One request is in flight at a time; a submission is awaited before the
 * next trial fetch. Words render through textContent (display-normalized
 * to NFC) but are submitted verbatim as the server delivered them.
 * Response time counts from the first paint after a trial renders, so no
 * input is accepted before that paint.
 */

import { ApiError, StudyClient } from "./api.js";
import type { Ack, OddOneOutTrial, RatingTrial } from "./api.js";
import {
  ViewState,
  applyKey,
  beginTrial,
  canSubmit,
  chooseRating,
  chooseWord,
  freshState,
  markShown,
  progressFraction,
  progressLabel,
  withSession,
} from "./state.js";

export type Screen =
  | { name: "consent" }
  | { name: "trial"; trialId: string; kind: "odd_one_out" | "rating" }
  | { name: "done" }
  | { name: "fatal"; message: string };

export interface AppHooks {
  now?: () => number;
  /** First-paint callback scheduler; tests may run it synchronously. */
  raf?: (callback: () => void) => void;
  /** Fired after each screen settles (trial screens: after first paint). */
  onScreen?: (screen: Screen) => void;
  /** Delay before re-fetching after a submit-side error (default 500 ms). */
  retryDelayMs?: number;
  sleep?: (ms: number) => Promise<void>;
}

const defaultRaf: (callback: () => void) => void =
  typeof requestAnimationFrame === "function"
    ? (cb) => requestAnimationFrame(() => cb())
    : (cb) => setTimeout(cb, 0);

export function createApp(root: HTMLElement, client: StudyClient, hooks: AppHooks = {}) {
  const now = hooks.now ?? (() => performance.now());
  const raf = hooks.raf ?? defaultRaf;
  const sleep = hooks.sleep ?? ((ms: number) => new Promise<void>((r) => setTimeout(r, ms)));
  const retryDelayMs = hooks.retryDelayMs ?? 500;
  const doc = root.ownerDocument;

  let state: ViewState = freshState();
  let submitRequested: (() => void) | null = null;

  function setState(next: ViewState): void {
    state = next;
    refreshControls();
  }

  function display(word: string): string {
    return word.normalize("NFC");
  }

  function element<K extends keyof HTMLElementTagNameMap>(
    tag: K,
    className?: string,
    text?: string,
  ): HTMLElementTagNameMap[K] {
    const node = doc.createElement(tag);
    if (className) {
      node.className = className;
    }
    if (text !== undefined) {
      node.textContent = text;
    }
    return node;
  }

  function renderShell(): void {
    root.textContent = "";
    const header = element("header", "task-header");
    const track = element("div", "progress-track");
    track.appendChild(element("div", "progress-bar"));
    header.appendChild(track);
    header.appendChild(element("span", "progress-label"));
    root.appendChild(header);
    root.appendChild(element("main", "screen"));
  }

  function screenArea(): HTMLElement {
    return root.querySelector<HTMLElement>(".screen")!;
  }

  function refreshControls(): void {
    const bar = root.querySelector<HTMLElement>(".progress-bar");
    const label = root.querySelector<HTMLElement>(".progress-label");
    if (bar) {
      bar.style.width = `${progressFraction(state) * 100}%`;
    }
    if (label) {
      label.textContent = progressLabel(state);
    }
    const submit = root.querySelector<HTMLButtonElement>(".submit");
    if (submit) {
      submit.disabled = !canSubmit(state);
    }
    for (const button of root.querySelectorAll<HTMLButtonElement>(".word")) {
      button.classList.toggle("selected", button.dataset.word === state.chosenWord);
    }
    for (const button of root.querySelectorAll<HTMLButtonElement>(".scale-point")) {
      button.classList.toggle("selected", Number(button.dataset.value) === state.rating);
    }
    const banner = root.querySelector<HTMLElement>(".error-banner");
    if (banner) {
      banner.textContent = state.error ?? "";
      banner.hidden = state.error === null;
    }
  }

  function renderConsent(text: string): Promise<void> {
    const area = screenArea();
    area.textContent = "";
    area.appendChild(element("p", "consent-text", text));
    const begin = element("button", "begin", "Begin");
    area.appendChild(begin);
    hooks.onScreen?.({ name: "consent" });
    return new Promise((resolve) => {
      begin.addEventListener("click", () => resolve(), { once: true });
    });
  }

  function renderOddOneOut(trial: OddOneOutTrial): void {
    const area = screenArea();
    area.textContent = "";
    area.appendChild(element("div", "error-banner")).hidden = true;
    area.appendChild(element("p", "prompt", "Pick the word that fits least with the other two."));
    const row = element("div", "words");
    for (const word of trial.words) {
      const button = element("button", "word", display(word));
      button.dataset.word = word;
      button.addEventListener("click", () => setState(chooseWord(state, word)));
      row.appendChild(button);
    }
    area.appendChild(row);
    area.appendChild(element("p", "hint", "Keys 1-3 select, Enter submits."));
    area.appendChild(submitButton());
  }

  function renderRating(trial: RatingTrial): void {
    const area = screenArea();
    area.textContent = "";
    area.appendChild(element("div", "error-banner")).hidden = true;
    area.appendChild(element("p", "prompt", "How concrete is this word?"));
    area.appendChild(element("p", "target-word", display(trial.word)));
    const scale = element("div", "scale");
    for (let value = trial.scale_min; value <= trial.scale_max; value++) {
      const button = element("button", "scale-point", String(value));
      button.dataset.value = String(value);
      button.addEventListener("click", () => setState(chooseRating(state, value)));
      scale.appendChild(button);
    }
    area.appendChild(scale);
    const labels = element("div", "scale-labels");
    labels.appendChild(element("span", "", `abstract (${trial.scale_min})`));
    labels.appendChild(element("span", "", `concrete (${trial.scale_max})`));
    area.appendChild(labels);
    area.appendChild(submitButton());
  }

  function submitButton(): HTMLButtonElement {
    const button = element("button", "submit", "Submit");
    button.disabled = true;
    button.addEventListener("click", () => submitRequested?.());
    return button;
  }

  function renderDone(): void {
    const area = screenArea();
    area.textContent = "";
    area.appendChild(element("p", "done-message", "All trials complete. Thank you!"));
    hooks.onScreen?.({ name: "done" });
  }

  function renderFatal(message: string): void {
    const area = screenArea();
    area.textContent = "";
    area.appendChild(element("p", "fatal-message", message));
    hooks.onScreen?.({ name: "fatal", message });
  }

  function onKeyDown(event: KeyboardEvent): void {
    if (event.key === "Enter") {
      if (canSubmit(state)) {
        submitRequested?.();
      }
      return;
    }
    setState(applyKey(state, event.key));
  }

  function awaitSubmit(): Promise<void> {
    return new Promise((resolve) => {
      submitRequested = () => {
        if (canSubmit(state)) {
          submitRequested = null;
          resolve();
        }
      };
    });
  }

  function firstPaint(trialId: string, kind: "odd_one_out" | "rating"): void {
    raf(() => {
      setState(markShown(state, now()));
      hooks.onScreen?.({ name: "trial", trialId, kind });
    });
  }

  async function submitCurrent(sessionId: string): Promise<Ack> {
    const trial = state.trial!;
    if (trial.complete) {
      throw new Error("cannot submit a completed session");
    }
    const elapsed = Math.max(0, now() - (state.shownAt ?? now()));
    if (trial.kind === "odd_one_out") {
      return client.submitChoice(sessionId, {
        trial_id: trial.trial_id,
        chosen: state.chosenWord!,
        response_time_ms: elapsed,
      });
    }
    return client.submitRating(sessionId, {
      trial_id: trial.trial_id,
      rating: state.rating!,
      response_time_ms: elapsed,
    });
  }

  async function run(): Promise<void> {
    renderShell();
    let session;
    try {
      session = await client.createSession();
    } catch (failure) {
      renderFatal(failure instanceof Error ? failure.message : String(failure));
      throw failure;
    }
    setState(withSession(state, session));
    if (session.consent_text) {
      await renderConsent(session.consent_text);
    }
    doc.addEventListener("keydown", onKeyDown);
    try {
      for (;;) {
        const trial = await client.nextTrial(session.session_id);
        if (trial.complete) {
          setState(beginTrial(state, trial));
          renderDone();
          return;
        }
        setState(beginTrial(state, trial));
        if (trial.kind === "odd_one_out") {
          renderOddOneOut(trial);
        } else {
          renderRating(trial);
        }
        refreshControls();
        firstPaint(trial.trial_id, trial.kind);
        await awaitSubmit();
        setState({ ...state, submitting: true, error: null });
        try {
          await submitCurrent(session.session_id);
        } catch (failure) {
          if (failure instanceof ApiError && failure.status !== 404) {
            // the server refused this submission; surface it and fall
            // through to a fresh trial fetch, which is always safe
            setState({ ...state, submitting: false, error: failure.message });
            await sleep(retryDelayMs);
            continue;
          }
          renderFatal(failure instanceof Error ? failure.message : String(failure));
          throw failure;
        }
      }
    } finally {
      doc.removeEventListener("keydown", onKeyDown);
    }
  }

  return {
    run,
    /** Test seam: current immutable view state. */
    getState: () => state,
  };
}
