/** Forward-only reading-session state machine.
 *
 * The reader sees one image at a time and assigns a quality score from 1 to
 * 4. Scores are final: the machine never moves backwards and refuses input
 * while a submission is in flight, so double key presses cannot produce
 * duplicate or out-of-order submissions.
 */

import { NextImage, ScoreAck, StudyClient } from "./api.js";

export type Phase = "idle" | "showing" | "submitting" | "complete";

export interface ReaderState {
  phase: Phase;
  sessionId: string | null;
  imageId: string | null;
  /** Base64 PNG of the current image, or null when none is loaded. */
  image: string | null;
  cursor: number;
  total: number;
  error: string | null;
}

export type Listener = (state: ReaderState) => void;

export class ReaderSession {
  private state: ReaderState = {
    phase: "idle",
    sessionId: null,
    imageId: null,
    image: null,
    cursor: 0,
    total: 0,
    error: null,
  };
  private listeners: Listener[] = [];

  constructor(private readonly client: StudyClient) {}

  getState(): ReaderState {
    return { ...this.state };
  }

  subscribe(listener: Listener): void {
    this.listeners.push(listener);
  }

  private update(patch: Partial<ReaderState>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) {
      listener(this.getState());
    }
  }

  async start(
    readerId: string,
    real: number,
    synthesized: number,
    seed: number,
  ): Promise<void> {
    if (this.state.phase !== "idle") {
      throw new Error("session already started");
    }
    const info = await this.client.createSession(
      readerId,
      real,
      synthesized,
      seed,
    );
    this.update({
      sessionId: info.session_id,
      cursor: info.cursor,
      total: info.total,
    });
    await this.advance();
  }

  private async advance(): Promise<void> {
    const next: NextImage = await this.client.nextImage(this.state.sessionId!);
    if (next.done) {
      this.update({
        phase: "complete",
        imageId: null,
        image: null,
        cursor: next.cursor,
        total: next.total,
      });
      return;
    }
    this.update({
      phase: "showing",
      imageId: next.image_id!,
      image: next.image!,
      cursor: next.cursor,
      total: next.total,
      error: null,
    });
  }

  /** Submit a score for the current image. Ignored unless an image is
   * showing, so repeated key presses while a request is pending are no-ops. */
  async score(likert: number): Promise<void> {
    if (this.state.phase !== "showing") {
      return;
    }
    if (![1, 2, 3, 4].includes(likert)) {
      this.update({ error: `invalid score ${likert}` });
      return;
    }
    const imageId = this.state.imageId!;
    this.update({ phase: "submitting" });
    let ack: ScoreAck;
    try {
      ack = await this.client.submitScore(
        this.state.sessionId!,
        imageId,
        likert,
      );
    } catch (err) {
      // Leave the image on screen so the reader can retry.
      this.update({ phase: "showing", error: String(err) });
      return;
    }
    this.update({ cursor: ack.cursor });
    if (ack.status === "complete") {
      this.update({ phase: "complete", imageId: null, image: null });
      return;
    }
    await this.advance();
  }
}
