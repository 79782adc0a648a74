import { describe, expect, it, vi } from "vitest";

import { StudyClient } from "../src/api.js";
import { ReaderSession } from "../src/session.js";

/** In-memory stand-in for the service: a fixed queue of opaque images. */
function fakeClient(total: number) {
  let cursor = 0;
  const scored = new Map<string, number>();
  const client = {
    createSession: vi.fn(async () => ({
      session_id: "s1",
      reader_id: "r1",
      total,
      cursor: 0,
      status: "active" as const,
    })),
    nextImage: vi.fn(async () =>
      cursor >= total
        ? { done: true, cursor, total }
        : {
            done: false,
            image_id: `img-${cursor}`,
            image: "cGl4ZWxz",
            cursor,
            total,
          },
    ),
    submitScore: vi.fn(async (_sid: string, imageId: string, likert: number) => {
      if (imageId !== `img-${cursor}`) {
        throw new Error("out of order");
      }
      scored.set(imageId, likert);
      cursor += 1;
      return {
        ok: true,
        cursor,
        total,
        status: cursor >= total ? ("complete" as const) : ("active" as const),
      };
    }),
    report: vi.fn(async () => ({})),
  };
  return { client: client as unknown as StudyClient, scored };
}

describe("ReaderSession", () => {
  it("walks every image forward and ends complete", async () => {
    const { client, scored } = fakeClient(5);
    const session = new ReaderSession(client);
    await session.start("r1", 3, 2, 0);
    expect(session.getState().phase).toBe("showing");
    for (let i = 0; i < 5; i++) {
      await session.score((i % 4) + 1);
    }
    const state = session.getState();
    expect(state.phase).toBe("complete");
    expect(state.cursor).toBe(5);
    expect(scored.size).toBe(5);
    expect(scored.get("img-0")).toBe(1);
  });

  it("never exposes provenance fields in its state", async () => {
    const { client } = fakeClient(2);
    const session = new ReaderSession(client);
    await session.start("r1", 1, 1, 0);
    const serialized = JSON.stringify(session.getState());
    expect(serialized).not.toContain("real");
    expect(serialized).not.toContain("synthesized");
    expect(serialized).not.toContain("truth");
  });

  it("ignores score calls while a submission is in flight", async () => {
    const { client } = fakeClient(3);
    let release!: () => void;
    const gate = new Promise<void>((resolve) => (release = resolve));
    const realSubmit = client.submitScore.bind(client);
    (client as any).submitScore = vi.fn(async (...args: any[]) => {
      await gate;
      return (realSubmit as any)(...args);
    });
    const session = new ReaderSession(client);
    await session.start("r1", 2, 1, 0);
    const first = session.score(4);
    const second = session.score(2); // arrives while phase is "submitting"
    release();
    await Promise.all([first, second]);
    expect((client as any).submitScore).toHaveBeenCalledTimes(1);
    expect(session.getState().cursor).toBe(1);
  });

  it("rejects invalid scores without contacting the service", async () => {
    const { client } = fakeClient(2);
    const session = new ReaderSession(client);
    await session.start("r1", 1, 1, 0);
    await session.score(7);
    expect(session.getState().error).toContain("invalid score");
    expect((client as any).submitScore).not.toHaveBeenCalled();
  });

  it("keeps the current image on a failed submit so the reader can retry", async () => {
    const { client } = fakeClient(2);
    (client as any).submitScore = vi
      .fn()
      .mockRejectedValueOnce(new Error("network down"))
      .mockResolvedValue({ ok: true, cursor: 1, total: 2, status: "active" });
    const session = new ReaderSession(client);
    await session.start("r1", 1, 1, 0);
    const imageBefore = session.getState().imageId;
    await session.score(3);
    let state = session.getState();
    expect(state.phase).toBe("showing");
    expect(state.imageId).toBe(imageBefore);
    expect(state.error).toContain("network down");
    await session.score(3);
    expect((client as any).submitScore).toHaveBeenCalledTimes(2);
    expect(session.getState().error).toBeNull();
  });

  it("refuses to start twice", async () => {
    const { client } = fakeClient(2);
    const session = new ReaderSession(client);
    await session.start("r1", 1, 1, 0);
    await expect(session.start("r1", 1, 1, 0)).rejects.toThrow(
      "already started",
    );
  });
});
