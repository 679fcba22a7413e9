"""Fit the bundled configs to the 1-camera latency and notification targets.

Writes data/config-table2.json (threshold-zero analyzer, for latency and
throughput runs) and data/config-pcp.json (default analyzer, for
notification-latency runs). Takes about ten seconds.
"""

from __future__ import annotations

import argparse
import json

from svs.calibration import calibrate
from svs.experiment import bundled_config_path
from svs.scenario import load_bundled


def _write(cfg, name: str, description: str) -> None:
    doc = {"description": description, **cfg.to_dict()}
    path = bundled_config_path(name)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {path}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default="campus-8cam")
    args = ap.parse_args()
    sc = load_bundled(args.scenario)
    cal = calibrate(sc)
    p = cal.pipeline_fit.predicted
    print(f"1-camera prediction: detector {p.detector:.3f}  action {p.action:.3f}  whole {p.whole:.3f}")
    print(f"unloaded PCP: object {cal.unloaded_pcp[0]:.3f}  behavioral {cal.unloaded_pcp[1]:.3f}")
    _write(cal.throughput, "table2", "latency/throughput runs: analyzer threshold zero, every movement is anomalous")
    _write(cal.pcp, "pcp", "notification-latency runs: default analyzer threshold, one reporting camera")


if __name__ == "__main__":
    main()
