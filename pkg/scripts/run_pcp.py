"""Notification latency for 1, 4 and 8 cameras with the bundled calibration."""

from __future__ import annotations

import argparse
import time

from svs.experiment import load_bundled_config, load_config, run_experiment
from svs.scenario import load_bundled, load_scenario
from svs.telemetry import render_report


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", help="scenario file (default: bundled campus-8cam)")
    ap.add_argument("--config", help="config file (default: bundled pcp)")
    ap.add_argument("--cameras", default="1,4,8")
    ap.add_argument("--format", default="table", choices=("table", "csv", "json"))
    args = ap.parse_args()
    sc = load_scenario(args.scenario) if args.scenario else load_bundled("campus-8cam")
    cfg = load_config(args.config) if args.config else load_bundled_config("pcp")
    reports = []
    for n in (int(x) for x in args.cameras.split(",")):
        t0 = time.perf_counter()
        reports.append(run_experiment(sc, cfg, camera_count=n).report)
        print(f"# {n} camera(s): {time.perf_counter() - t0:.1f} s wall")
    print(render_report(reports, args.format))


if __name__ == "__main__":
    main()
