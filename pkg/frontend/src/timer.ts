/**
 * Focused-time case timer.
 *
 * Accumulates only while the case view has focus: backgrounding the tab
 * pauses it. Elapsed time is monotone non-decreasing and the decision
 * control is enabled only while the timer is running. Exported times
 * are labeled focused-time, not wall-clock.
 */

export type Clock = () => number;

export class FocusTimer {
  private accumulatedMs = 0;
  private runningSince: number | null = null;
  private stopped = false;

  constructor(private readonly now: Clock) {}

  start(): void {
    if (this.stopped) {
      throw new Error("timer already stopped");
    }
    if (this.runningSince === null) {
      this.runningSince = this.now();
    }
  }

  /** Tab lost focus: stop accumulating but keep the total. */
  pause(): void {
    if (this.runningSince !== null) {
      this.accumulatedMs += Math.max(0, this.now() - this.runningSince);
      this.runningSince = null;
    }
  }

  /** Tab regained focus. */
  resume(): void {
    if (!this.stopped) {
      this.start();
    }
  }

  /** Decision submitted: freeze the total for good. */
  stop(): number {
    this.pause();
    this.stopped = true;
    return this.elapsedSeconds();
  }

  get running(): boolean {
    return this.runningSince !== null && !this.stopped;
  }

  elapsedSeconds(): number {
    const live = this.runningSince === null ? 0 : Math.max(0, this.now() - this.runningSince);
    return (this.accumulatedMs + live) / 1000;
  }
}
