/** Browser entry point: reads session parameters from the query string and
 * starts a reading session against the service hosting the page. */

import { StudyClient } from "./api.js";
import { ReaderSession } from "./session.js";
import { bind, UiElements } from "./ui.js";

export function startApp(doc: Document, baseUrl: string): ReaderSession {
  const params = new URLSearchParams(doc.location?.search ?? "");
  const els: UiElements = {
    image: doc.getElementById("reader-image") as HTMLImageElement,
    progress: doc.getElementById("reader-progress") as HTMLElement,
    status: doc.getElementById("reader-status") as HTMLElement,
  };
  const session = new ReaderSession(new StudyClient(baseUrl));
  bind(session, els, (handler) => {
    doc.addEventListener("keydown", (event) =>
      handler((event as KeyboardEvent).key),
    );
  });
  void session.start(
    params.get("reader") ?? "reader",
    Number(params.get("real") ?? "10"),
    Number(params.get("synthesized") ?? "10"),
    Number(params.get("seed") ?? "0"),
  );
  return session;
}

declare const window: (Window & typeof globalThis) | undefined;

if (typeof window !== "undefined" && typeof document !== "undefined") {
  startApp(document, "");
}
