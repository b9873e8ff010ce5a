/** Pure view-state transitions, kept free of the DOM so they are
 * testable without a browser.
 *
 * Two invariants live here: submit stays disabled until a selection
 * exists, and progress always echoes the server's index/total rather
 * than anything counted locally.
 */

import type { SessionInfo, Trial } from "./api.js";

export interface ViewState {
  session: SessionInfo | null;
  trial: Trial | null;
  /** Word picked on an odd-one-out trial. */
  chosenWord: string | null;
  /** Scale point picked on a rating trial. */
  rating: number | null;
  /** Clock reading at the trial's first paint; response times count from here. */
  shownAt: number | null;
  submitting: boolean;
  error: string | null;
}

export function freshState(): ViewState {
  return {
    session: null,
    trial: null,
    chosenWord: null,
    rating: null,
    shownAt: null,
    submitting: false,
    error: null,
  };
}

export function withSession(state: ViewState, session: SessionInfo): ViewState {
  return { ...state, session };
}

/** A newly fetched trial clears any previous selection and timing;
 * shownAt stays unset until the first paint is reported. */
export function beginTrial(state: ViewState, trial: Trial): ViewState {
  return {
    ...state,
    trial,
    chosenWord: null,
    rating: null,
    shownAt: null,
    submitting: false,
    error: null,
  };
}

export function markShown(state: ViewState, at: number): ViewState {
  return { ...state, shownAt: at };
}

export function chooseWord(state: ViewState, word: string): ViewState {
  if (state.submitting || state.shownAt === null || state.trial === null || state.trial.complete) {
    return state;
  }
  if (state.trial.kind !== "odd_one_out" || !state.trial.words.includes(word)) {
    return state;
  }
  return { ...state, chosenWord: word };
}

export function chooseRating(state: ViewState, value: number): ViewState {
  if (state.submitting || state.shownAt === null || state.trial === null || state.trial.complete) {
    return state;
  }
  if (state.trial.kind !== "rating") {
    return state;
  }
  if (!Number.isInteger(value) || value < state.trial.scale_min || value > state.trial.scale_max) {
    return state;
  }
  return { ...state, rating: value };
}

export function canSubmit(state: ViewState): boolean {
  if (state.submitting || state.trial === null || state.trial.complete) {
    return false;
  }
  return state.trial.kind === "odd_one_out" ? state.chosenWord !== null : state.rating !== null;
}

/** Map a keyboard key to a selection: digits 1..3 pick the word at that
 * position, digits 1..9 pick the scale point on a rating trial. */
export function applyKey(state: ViewState, key: string): ViewState {
  if (!/^[1-9]$/.test(key) || state.trial === null || state.trial.complete) {
    return state;
  }
  const value = Number(key);
  if (state.trial.kind === "odd_one_out") {
    const word = state.trial.words[value - 1];
    return word === undefined ? state : chooseWord(state, word);
  }
  return chooseRating(state, value);
}

/** Progress as the server reports it; 1 once the session is complete. */
export function progressFraction(state: ViewState): number {
  if (state.trial === null) {
    return 0;
  }
  if (state.trial.complete) {
    return 1;
  }
  return state.trial.index / state.trial.total;
}

export function progressLabel(state: ViewState): string {
  if (state.trial === null || state.trial.complete) {
    return "";
  }
  return `${state.trial.index} / ${state.trial.total}`;
}
