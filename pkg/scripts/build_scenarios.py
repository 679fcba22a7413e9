"""Regenerate the bundled scenario files from their seeds."""

from __future__ import annotations

import argparse

from svs.scenario import bundled_scenario_path, dump_scenario
from svs.scenegen import campus_8cam, smoke_1cam

BUILDERS = {"campus-8cam": campus_8cam, "smoke-1cam": smoke_1cam}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("names", nargs="*", default=sorted(BUILDERS))
    args = ap.parse_args()
    for name in args.names:
        path = bundled_scenario_path(name)
        sc = BUILDERS[name]()
        dump_scenario(sc, path)
        print(f"{path}: {len(sc.cameras)} cameras, {len(sc.entities)} entities, {len(sc.injections)} injections")


if __name__ == "__main__":
    main()
