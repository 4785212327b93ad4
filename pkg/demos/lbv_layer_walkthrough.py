"""Walk through what an LBV layer computes and how it relates to LBP.

1. A random ternary bank is drawn and checked for sparsity.
2. The bank is applied with the add/subtract kernel; the op counter shows
   that no multiplication happens in that stage.
3. A hand-made bank whose filters are "neighbour minus center" reproduces
   4-neighbour LBP codes exactly once the difference maps are thresholded.
   The random bank is the learned-weighting generalisation of this.
4. A full LBV block (bank, ReLU, 1x1x1 conv, BN, ReLU) is run on a cuboid.
"""

import numpy as np

from lbvcnn import opcount
from lbvcnn.bank import TernaryFilterBank, generate_bank
from lbvcnn.layers import LbvBlock, ternary_conv3d
from lbvcnn.lbp import lbp_map, neighbor_offsets
from lbvcnn.network import lbv_block_params
from lbvcnn.tensor import Rng
from lbvcnn.video import synth_dataset


def main():
    bank = generate_bank(64, 0.9, seed=0)
    print(f"bank: {bank.count} filters of {bank.filter_shape}, "
          f"nonzero fraction {bank.nonzero_fraction():.3f}, id {bank.id[:12]}")

    cub = synth_dataset(6, 1, seed=0, size=32).samples[0].data  # [X, Y, T]
    x = cub[None, None].astype(np.float32)

    with opcount.counting() as c:
        diff = ternary_conv3d(opcount.instrument(x), bank)
    t = c.totals()
    print(f"difference maps {diff.shape}: adds={t['adds']} subs={t['subs']} muls={t['muls']}")

    # LBP as a ternary bank: filter i = (neighbour i) - (center), in the XY plane
    p = 4
    vals = np.zeros((p, 3, 3, 3), np.int8)
    for i, (dr, dc) in enumerate(neighbor_offsets(p, 1)):
        vals[i, 1 + int(dr), 1 + int(dc), 1] += 1
        vals[i, 1, 1, 1] -= 1
    lbp_bank = TernaryFilterBank(vals)
    d = ternary_conv3d(cub[None].astype(np.float64), lbp_bank)  # [p, X, Y, T]
    codes = sum((d[i] >= 0).astype(int) << i for i in range(p))
    frame = 5
    ref = lbp_map(cub[:, :, frame].astype(np.float64), p, 1)
    same = np.array_equal(codes[1:-1, 1:-1, frame], ref)
    print(f"thresholded 'neighbour minus center' bank reproduces LBP(p=4, r=1): {same}")

    block = LbvBlock(bank, 1, 64, Rng(0))
    out = block.forward(x, training=False)
    print(f"LBV block output {out.shape}, {np.mean(out > 0):.2%} positive")
    rep = lbv_block_params(64, 64)
    print(f"64->64 block: {rep['pointwise_weights']} trainable weights vs "
          f"{rep['dense_equivalent_weights']} for a dense 3x3x3 conv (x{rep['ratio']:.0f})")


if __name__ == "__main__":
    main()
