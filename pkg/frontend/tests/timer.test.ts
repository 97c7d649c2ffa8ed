import { describe, expect, it } from "vitest";

import { FocusTimer } from "../src/timer.js";
import { FakeClock } from "./helpers.js";

describe("focused-time timer", () => {
  it("accumulates only while focused", () => {
    const clock = new FakeClock();
    const timer = new FocusTimer(clock.now);
    timer.start();
    clock.advance(10_000);
    timer.pause(); // tab backgrounded
    clock.advance(60_000);
    timer.resume();
    clock.advance(5_000);
    expect(timer.elapsedSeconds()).toBe(15);
  });

  it("is monotone non-decreasing across arbitrary focus changes", () => {
    const clock = new FakeClock();
    const timer = new FocusTimer(clock.now);
    timer.start();
    let previous = 0;
    const steps: Array<[string, number]> = [
      ["advance", 500],
      ["pause", 0],
      ["advance", 2000],
      ["resume", 0],
      ["advance", 300],
      ["pause", 0],
      ["resume", 0],
      ["advance", 700],
    ];
    for (const [op, ms] of steps) {
      if (op === "advance") clock.advance(ms);
      else if (op === "pause") timer.pause();
      else timer.resume();
      const current = timer.elapsedSeconds();
      expect(current).toBeGreaterThanOrEqual(previous);
      previous = current;
    }
  });

  it("stop freezes the total and disables restarting", () => {
    const clock = new FakeClock();
    const timer = new FocusTimer(clock.now);
    timer.start();
    clock.advance(4_000);
    expect(timer.stop()).toBe(4);
    clock.advance(9_000);
    expect(timer.elapsedSeconds()).toBe(4);
    expect(timer.running).toBe(false);
    timer.resume(); // no-op after stop
    expect(timer.running).toBe(false);
    expect(() => timer.start()).toThrow();
  });

  it("runs while started and reports running state for decision gating", () => {
    const clock = new FakeClock();
    const timer = new FocusTimer(clock.now);
    expect(timer.running).toBe(false);
    timer.start();
    expect(timer.running).toBe(true);
    timer.pause();
    expect(timer.running).toBe(false);
  });
});
