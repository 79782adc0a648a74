/** DOM wiring for the reading client.
 *
 * Elements are passed in rather than looked up so the module can be driven
 * by plain stub objects in tests.
 */

import { ReaderSession, ReaderState } from "./session.js";

export interface UiElements {
  image: { src: string; hidden: boolean };
  progress: { textContent: string | null };
  status: { textContent: string | null };
}

export function render(state: ReaderState, els: UiElements): void {
  if (state.phase === "showing" || state.phase === "submitting") {
    els.image.src = `data:image/png;base64,${state.image}`;
    els.image.hidden = false;
  } else {
    els.image.src = "";
    els.image.hidden = true;
  }
  els.progress.textContent = state.total
    ? `${state.cursor} / ${state.total}`
    : "";
  if (state.error) {
    els.status.textContent = state.error;
  } else if (state.phase === "complete") {
    els.status.textContent = "Session complete. Thank you.";
  } else if (state.phase === "submitting") {
    els.status.textContent = "Saving…";
  } else if (state.phase === "showing") {
    els.status.textContent = "Rate image quality: press 1 (worst) to 4 (best)";
  } else {
    els.status.textContent = "";
  }
}

/** Map a keyboard event to a score submission; other keys are ignored. */
export function handleKey(key: string, session: ReaderSession): Promise<void> {
  if (["1", "2", "3", "4"].includes(key)) {
    return session.score(Number(key));
  }
  return Promise.resolve();
}

export function bind(
  session: ReaderSession,
  els: UiElements,
  addKeyListener: (handler: (key: string) => void) => void,
): void {
  session.subscribe((state) => render(state, els));
  addKeyListener((key) => {
    void handleKey(key, session);
  });
  render(session.getState(), els);
}
