"""Watch observability emerge step by step, then compare with a degenerate track.

Run: python3 demos/rank_trace.py
"""

from micarray_calib import load_bundled, rank_trace
from micarray_calib.observability import reduced_ranks_at


def show(name):
    sc, _ = load_bundled(name)
    rep = rank_trace(sc)
    print(f"{name}: {sc.n_arrays} arrays, {sc.n_steps} steps")
    print("  step  rank   g2  deficit")
    for step, rank, g2, deficit, *_ in rep.rows()[:8]:
        print(f"  {step:4d} {rank:5d} {g2:4d} {deficit:8d}")
    if rep.first_full_rank_step is None:
        print("  never observable:")
        for c in rep.violated_conditions:
            print(f"    {c.code}: {c.message}")
    else:
        k = rep.first_full_rank_step
        print(f"  full column rank from step {k}; reduced ranks there: {reduced_ranks_at(sc, k)}")
    print()


if __name__ == "__main__":
    show("observable_a")
    show("collinear_origin")
    show("gimbal_arrays4_7")
