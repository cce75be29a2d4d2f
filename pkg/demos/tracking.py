"""Fly the scripted path with the mocap oracle and with a pose network.

Usage: python demos/tracking.py [model.nff|model.nfq]

Without a model file an untrained mid-fusion network is flown, which loses
the subject almost at once; the point is the side-by-side result rows.
"""
import sys

from nanofusion import closedloop, formats, models
from nanofusion.closedloop import Mocap, SimConfig


def main(path=None):
    if path is None:
        net, name = models.build("mid-fusion", seed=0), "mid-fusion (untrained)"
    elif path.endswith(".nfq"):
        net, name = formats.load_quant_model(path), path
    else:
        net, name = formats.load_float_model(path), path
    route = closedloop.default_path()
    cfg = SimConfig(seed=0)
    rows = []
    for label, source in (("mocap", Mocap()), (name, net)):
        ep = closedloop.run_episode(source, route, cfg)
        rows.append((label, 0, ep.result))
        r = ep.result
        print(f"{label:<28} flight {r.flight_time:6.1f} s  path {r.completed_path:5.1f}%  "
              f"e_xy {r.e_xy:.3f} m  e_theta {r.e_theta:.3f} rad")
    sys.stdout.write("\n" + closedloop.results_csv(rows))


if __name__ == "__main__":
    main(*sys.argv[1:2])
