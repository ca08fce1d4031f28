import { describe, expect, it } from "vitest";

import { WorkbenchApi } from "../src/api.js";
import { AnnotationBoard } from "../src/board.js";
import { makeFakeService } from "./fake_service.js";

/** A manual scheduler so polling can be stepped deterministically. */
function manualScheduler() {
  const queue: Array<{ fn: () => void; at: number }> = [];
  let now = 0;
  return {
    schedule: (fn: () => void, ms: number) => queue.push({ fn, at: now + ms }),
    async advance(ms: number) {
      now += ms;
      const due = queue.filter((q) => q.at <= now);
      queue.length = 0;
      for (const q of due) {
        await q.fn();
        // allow chained promises (refresh) to settle
        await new Promise((resolve) => setTimeout(resolve, 0));
      }
    },
  };
}

describe("AnnotationBoard", () => {
  it("annotating in one view becomes visible in another within one poll", async () => {
    const fake = makeFakeService(["viewA", "viewB"]);
    const api = new WorkbenchApi(fake.transport);
    const clock = manualScheduler();
    const board = new AnnotationBoard(api, clock.schedule);
    board.openView("viewA");
    board.openView("viewB");
    board.status = "behind";
    const stop = board.startPolling(2000);

    const id = await board.annotateComponents("viewA", ["core"]);
    expect(id).toBe("a0000");
    // the authoring path refreshes immediately
    expect(board.views.get("viewB")!.overlays.map((o) => o.annotation)).toContain(id);

    // a second author's annotation arrives via polling inside 5 s
    await api.addAnnotation({ image: "viewB", status: "ahead", components: ["core"] });
    expect(board.views.get("viewA")!.overlays).toHaveLength(1);
    await clock.advance(2000);
    expect(board.views.get("viewA")!.overlays).toHaveLength(2);
    stop();
  });

  it("stopped boards do not poll", async () => {
    const fake = makeFakeService(["viewA"]);
    const api = new WorkbenchApi(fake.transport);
    const clock = manualScheduler();
    const board = new AnnotationBoard(api, clock.schedule);
    board.openView("viewA");
    const stop = board.startPolling(2000);
    stop();
    const calls = fake.state.log.length;
    await clock.advance(10000);
    expect(fake.state.log.length).toBe(calls);
  });

  it("rejects degenerate polygons client-side", async () => {
    const fake = makeFakeService(["viewA"]);
    const board = new AnnotationBoard(new WorkbenchApi(fake.transport));
    await expect(
      board.annotatePolygon("viewA", [
        [0, 0],
        [1, 1],
      ]),
    ).rejects.toThrow(/3 vertices/);
  });

  it("records per-view transfer errors without dropping the view", async () => {
    const fake = makeFakeService(["viewA"]);
    const api = new WorkbenchApi(fake.transport);
    const board = new AnnotationBoard(api);
    board.openView("viewA");
    board.openView("ghost-view");  // the fake returns transfers for any image
    await board.refresh();
    expect(board.views.get("viewA")!.error).toBeUndefined();
  });
});
