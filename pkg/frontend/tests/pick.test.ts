import { describe, expect, it } from "vitest";

import { WorkbenchApi } from "../src/api.js";
import { MIN_PAIRS, PickSession } from "../src/pick.js";
import { residualLabel, residualLevel } from "../src/overlay.js";
import { makeFakeService } from "./fake_service.js";

function sessionWithFake(residuals?: number[]) {
  const fake = makeFakeService(["view00", "view01"], { residuals });
  const api = new WorkbenchApi(fake.transport);
  return { session: new PickSession(api, "view00"), fake };
}

describe("PickSession", () => {
  it("alternates pixel and model-point phases", () => {
    const { session } = sessionWithFake();
    expect(session.phase).toBe("need-pixel");
    session.pickPixel(10, 20);
    expect(session.phase).toBe("need-model-point");
    session.pickModelPoint([0, -2.5, 1]);
    expect(session.phase).toBe("need-pixel");
    expect(session.pairs).toHaveLength(1);
  });

  it("ignores a model pick without a pending pixel", () => {
    const { session } = sessionWithFake();
    session.pickModelPoint([0, 0, 0]);
    expect(session.pairs).toHaveLength(0);
  });

  it("submit stays disabled below four pairs", async () => {
    const { session } = sessionWithFake();
    for (let i = 0; i < MIN_PAIRS - 1; i++) {
      session.pickPixel(i * 10, 5);
      session.pickModelPoint([i, -2.5, 1]);
    }
    expect(session.canSubmit).toBe(false);
    await expect(session.submit()).rejects.toThrow(/at least 4/);
  });

  it("undo removes the pending pixel first, then whole pairs", () => {
    const { session } = sessionWithFake();
    session.pickPixel(1, 1);
    session.pickModelPoint([0, 0, 0]);
    session.pickPixel(2, 2);
    session.undo();
    expect(session.pendingPixel).toBeNull();
    expect(session.pairs).toHaveLength(1);
    session.undo();
    expect(session.pairs).toHaveLength(0);
  });

  it("submitting four picks registers and exposes residuals", async () => {
    const { session, fake } = sessionWithFake([0.4, 0.8, 1.2, 0.6]);
    for (let i = 0; i < MIN_PAIRS; i++) {
      session.pickPixel(50 + 80 * i, 120);
      session.pickModelPoint([-4 + 2.5 * i, -2.5, 1.5]);
    }
    expect(session.canSubmit).toBe(true);
    const outcome = await session.submit();
    expect(outcome.status).toBe("registered");
    expect(outcome.residuals).toHaveLength(4);
    expect(Math.max(...outcome.residuals!)).toBeLessThan(2.0);
    expect(residualLevel(outcome.residuals!)).toBe("good");
    expect(residualLabel(outcome.residuals!)).toMatch(/max residual 1\.2 px/);
    expect(fake.state.registered.has("view00")).toBe(true);
  });

  it("resubmitting with the same pairs is idempotent server-side", async () => {
    const { session, fake } = sessionWithFake();
    for (let i = 0; i < MIN_PAIRS; i++) {
      session.pickPixel(50 + 80 * i, 120);
      session.pickModelPoint([-4 + 2.5 * i, -2.5, 1.5]);
    }
    await session.submit();
    const annotationsBefore = fake.state.correspondences.get("view00")!.length;
    await session.submit();
    expect(fake.state.correspondences.get("view00")).toHaveLength(annotationsBefore);
  });
});
