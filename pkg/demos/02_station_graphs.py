"""The five station graphs and how they combine.

Three graphs are fixed by geography and training history (distance kernel,
nearest neighbors, correlation patterns); two are produced by parameters
(static node embeddings, per-window projections).  A per-node weight matrix
blends them, and the blend feeds the spectral filter.
"""

import numpy as np

from stationcast import data as dt
from stationcast import graphs as gr


def describe(name, a):
    nz = 100.0 * (a.weights != 0).mean()
    sym = "symmetric" if np.array_equal(a.weights, a.weights.T) \
        else "one-sided"
    print(f"  {name:<10} {nz:5.1f}% nonzero, {sym}, "
          f"range [{a.weights.min():+.3f}, {a.weights.max():+.3f}]")


def main():
    ds = dt.generate_synthetic(dt.SynthConfig(n=12, t=400, d=3, seed=3))
    train = dt.split_temporal(ds, (3, 1, 2))[0]

    gs = gr.build_static_graphs(train, sigma="auto", epsilon=0.1,
                                n_adjacent=4)
    print(f"static graphs for {gs.n} stations "
          f"(sigma {gs.meta['sigma']:.1f} km):")
    for kind in ("distance", "neighbor", "pattern"):
        describe(kind, gs[kind])

    rng = np.random.default_rng(0)
    lg = gr.init_learnable_graph(gs.n, d_emb=8, rng=rng)
    a_l = gr.eval_learnable_graph(lg)
    describe("learnable", a_l)

    window = train.values[:, :12, :]
    dg = gr.init_dynamic_graph(w_in=12, d=3, d_emb=8, rng=rng)
    a_k = gr.eval_dynamic_graph(window, dg)
    describe("dynamic", a_k)
    pair_zero = np.minimum(a_k.weights, a_k.weights.T).max()
    print(f"  (one-sidedness: min(A_ij, A_ji) is always 0; "
          f"max over pairs = {pair_zero})")

    kinds = ("distance", "neighbor", "pattern", "learnable", "dynamic")
    graph_set = {"distance": gs["distance"], "neighbor": gs["neighbor"],
                 "pattern": gs["pattern"], "learnable": a_l, "dynamic": a_k}
    fusion = gr.init_fusion_params(gs.n, kinds)
    fused = gr.fuse_graphs(graph_set, fusion)
    print(f"\nequal-weight fusion starts every graph at "
          f"{1 / len(kinds):.1f}; fused range "
          f"[{fused.weights.min():+.3f}, {fused.weights.max():+.3f}]")

    lap = gr.scaled_laplacian(fused)
    print(f"largest Laplacian eigenvalue {lap.lambda_max:.4f}; "
          f"rescaled spectrum lies in [-1, 1]: "
          f"[{np.linalg.eigvalsh(lap.l_tilde).min():+.4f}, "
          f"{np.linalg.eigvalsh(lap.l_tilde).max():+.4f}]")

    theta = rng.normal(0.0, 0.3, (3, 1, 2))
    x = train.values[:, 0, :1]
    y = gr.cheb_filter(lap, theta, x)
    print(f"order-3 polynomial filter maps signal {x.shape} -> {y.shape} "
          f"without an eigendecomposition")


if __name__ == "__main__":
    main()
