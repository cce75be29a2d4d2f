"""Quantize a mid-fusion network and schedule it under shrinking L1 budgets.

Runs in a few seconds with an untrained network; pass a ``.nff`` path to use
a trained one.
"""
import sys

import numpy as np

from nanofusion import formats, models, quant, tiling
from nanofusion.dataset import generate_raw
from nanofusion.tiling import KB, MemoryBudget


def main(path=None):
    model = formats.load_float_model(path) if path else models.build("mid-fusion", seed=0)
    renders = generate_raw(7, 96)
    q = quant.quantize_model(model, renders.images[:64], renders.depths[:64])
    print(f"{model.tag}: {model.mac_count():,} MACs, {len(q.ops)} integer ops")

    f = model.predict(renders.images[64:], renders.depths[64:])
    i = q.predict(renders.images[64:], renders.depths[64:])
    print("float vs int8 mean |diff| per output:", np.round(np.abs(f - i).mean(axis=0), 4))

    for l1 in (64 * KB, 32 * KB, 16 * KB):
        plan = tiling.plan_tiling(q, MemoryBudget(l1_bytes=l1))
        feeds = q.quantize_inputs(renders.images[64:72], renders.depths[64:72])
        out, peak = tiling.run_tiled_int(q, plan, feeds)
        exact = out.tobytes() == q.run_int(feeds).tobytes()
        print(f"\nL1 {l1 // KB} KB: {sum(plan.tile_counts().values())} tiles, "
              f"peak {peak / KB:.1f} KB, bit-exact {exact}")
    print()
    print(plan.report())


if __name__ == "__main__":
    main(*sys.argv[1:2])
