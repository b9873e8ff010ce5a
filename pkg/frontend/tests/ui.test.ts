// @vitest-environment happy-dom

/** Drives the rendered page against a real service process: consent,
 * ten odd-one-out trials, five ratings, done screen. Selections go in
 * through real DOM clicks and keyboard events, and the exported logs
 * are counted afterwards.
 */

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiError, StudyClient } from "../src/api";
import { createApp, type Screen } from "../src/app";
import { startService, type ServiceHandle } from "./service";

const PORT = 8932;
const CONSENT = "You will pick odd words out and rate words for concreteness.";

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

async function until(check: () => boolean, what: string, timeoutMs = 15_000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (!check()) {
    if (Date.now() > deadline) {
      throw new Error(`timed out waiting for ${what}`);
    }
    await sleep(5);
  }
}

function pressKey(key: string): void {
  document.dispatchEvent(new KeyboardEvent("keydown", { key }));
}

describe("scripted browser session", () => {
  let svc: ServiceHandle;

  beforeAll(async () => {
    svc = await startService(PORT, CONSENT);
  });

  afterAll(async () => {
    await svc.stop();
  });

  it("completes both phases through the rendered page", async () => {
    const root = document.createElement("div");
    document.body.appendChild(root);
    const screens: Screen[] = [];
    const app = createApp(root, new StudyClient(svc.url), {
      raf: (callback) => setTimeout(callback, 0),
      onScreen: (screen) => screens.push(screen),
    });
    const finished = app.run();

    await until(() => screens.some((s) => s.name === "consent"), "consent screen");
    expect(root.querySelector(".consent-text")!.textContent).toBe(CONSENT);
    root.querySelector<HTMLButtonElement>(".begin")!.click();

    const painted = () => screens.filter((s) => s.name === "trial").length;
    for (let submitted = 0; submitted < 15; submitted++) {
      await until(() => painted() > submitted, `paint of trial ${submitted + 1}`);
      const trial = app.getState().trial!;
      expect(trial.complete).toBe(false);
      if (trial.complete) {
        continue;
      }

      const bar = root.querySelector<HTMLElement>(".progress-bar")!;
      const label = root.querySelector<HTMLElement>(".progress-label")!;
      expect(label.textContent).toBe(`${trial.index} / ${trial.total}`);
      expect(bar.style.width).toBe(`${(trial.index / trial.total) * 100}%`);

      const submit = root.querySelector<HTMLButtonElement>(".submit")!;
      expect(submit.disabled).toBe(true);

      if (trial.kind === "odd_one_out") {
        const wordButtons = [...root.querySelectorAll<HTMLButtonElement>(".word")];
        // rendered order is the server's display order, verbatim
        expect(wordButtons.map((b) => b.dataset.word)).toEqual(trial.words);
        if (submitted % 2 === 0) {
          wordButtons[1]!.click();
          expect(app.getState().chosenWord).toBe(trial.words[1]);
        } else {
          pressKey("3");
          expect(app.getState().chosenWord).toBe(trial.words[2]);
        }
      } else {
        expect(root.querySelector(".target-word")!.textContent).toBe(trial.word);
        const scale = [...root.querySelectorAll<HTMLButtonElement>(".scale-point")];
        expect(scale).toHaveLength(9);
        if (submitted % 2 === 0) {
          scale[6]!.click();
          expect(app.getState().rating).toBe(7);
        } else {
          pressKey("4");
          expect(app.getState().rating).toBe(4);
        }
      }

      expect(submit.disabled).toBe(false);
      if (submitted === 2) {
        // double-click: the second click must not produce a second post
        submit.click();
        submit.click();
      } else if (submitted % 2 === 1) {
        pressKey("Enter");
      } else {
        submit.click();
      }
    }

    await until(() => screens.some((s) => s.name === "done"), "done screen");
    await finished;
    expect(root.querySelector(".done-message")).not.toBeNull();
    expect(root.querySelector<HTMLElement>(".progress-bar")!.style.width).toBe("100%");

    const client = new StudyClient(svc.url);
    const judgments = (await client.exportJudgments()).trimEnd().split("\n");
    expect(judgments).toHaveLength(11);
    for (const row of judgments.slice(1)) {
      const rt = Number(row.split(",")[5]);
      expect(Number.isFinite(rt)).toBe(true);
      expect(rt).toBeGreaterThanOrEqual(0);
    }
    const ratings = (await client.exportRatings()).trimEnd().split("\n");
    expect(ratings).toHaveLength(6);

    document.body.removeChild(root);
  });

  it("shows a fatal screen when the service cannot be reached", async () => {
    const root = document.createElement("div");
    document.body.appendChild(root);
    const dead = new StudyClient("http://127.0.0.1:9", { retries: 0, backoffMs: 1 });
    const app = createApp(root, dead, { raf: (callback) => setTimeout(callback, 0) });
    await expect(app.run()).rejects.toBeInstanceOf(ApiError);
    expect(root.querySelector(".fatal-message")).not.toBeNull();
    document.body.removeChild(root);
  });
});
