/**
 * The UI fixture walkthrough, end to end against the fake service:
 * pick four correspondences and see sub-2-px residuals, annotate in one
 * view and see it in a second within the poll budget, and hit the
 * no-temporal-data affordance on a singleton viewpoint.
 */

import { describe, expect, it } from "vitest";

import { WorkbenchApi } from "../src/api.js";
import { AnnotationBoard } from "../src/board.js";
import { PickSession } from "../src/pick.js";
import { residualLevel } from "../src/overlay.js";
import { TimelineState } from "../src/timeline.js";
import { makeFakeService } from "./fake_service.js";

describe("navigator walkthrough", () => {
  it("pick -> register -> residuals under 2 px", async () => {
    const fake = makeFakeService(["view00", "view01", "loner"], {
      residuals: [0.3, 0.7, 1.4, 0.9],
    });
    const api = new WorkbenchApi(fake.transport);
    const session = new PickSession(api, "view00");
    // four photo<->model picks, the model side refined by the service
    for (const x of [60, 180, 300, 420]) {
      session.pickPixel(x, 140);
      const hit = await api.pickModelPoint([0, -13, 2], [0.01 * x, 1, 0]);
      session.pickModelPoint(hit.point as [number, number, number], hit.component);
    }
    const outcome = await session.submit();
    expect(outcome.status).toBe("registered");
    expect(outcome.residuals!.every((r) => r < 2.0)).toBe(true);
    expect(residualLevel(outcome.residuals!)).toBe("good");
  });

  it("annotation shows up in a second view within 5 s of polling", async () => {
    const fake = makeFakeService(["view00", "view01"]);
    const api = new WorkbenchApi(fake.transport);
    let queued: Array<() => void> = [];
    const board = new AnnotationBoard(api, (fn) => queued.push(fn));
    board.openView("view00");
    board.openView("view01");
    board.startPolling(2000);
    board.status = "behind";
    await board.annotateComponents("view00", ["core"]);
    // two poll ticks = 4 s < 5 s budget
    for (let tick = 0; tick < 2; tick++) {
      const due = queued;
      queued = [];
      for (const fn of due) await fn();
      await new Promise((resolve) => setTimeout(resolve, 0));
    }
    const overlays = board.views.get("view01")!.overlays;
    expect(overlays.length).toBeGreaterThan(0);
    expect(overlays[0].status).toBe("behind");
  });

  it("singleton viewpoint surfaces the no-temporal-data affordance", async () => {
    const fake = makeFakeService(["view00", "view01", "loner"]);
    fake.state.stacks.set("view00", ["view00", "view01"]);
    const api = new WorkbenchApi(fake.transport);
    const tl = await api.timeline();
    const timeline = new TimelineState(
      { start: tl.model.start, finish: tl.model.finish },
      "2020-10-01",
    );
    timeline.registerViewpointGroups(tl.viewpoint_groups, ["view00", "view01", "loner"]);
    timeline.setDate("2020-03-01");
    expect(timeline.revealMode("view00")).toBe("past-frame");
    expect(timeline.revealMode("loner")).toBe("no-temporal-data");
    // and the service agrees when probed directly
    expect(await api.probeReveal("loner", "2020-03-01")).toBe("no-temporal-data");
    expect(await api.probeReveal("view00", "2020-03-01")).toBe("ok");
  });
});
