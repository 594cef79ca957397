"""Scratch harness: sweep desk-scale configs for the component ablation.

Not part of the package; used to pick the acceptance-test configuration.
"""

import json
import statistics
import sys
import time


sys.path.insert(0, "src")

from spotalign import data_io, model, trainer


def run_config(label, seeds, *, d, lr, batch, k, dropout, epochs=50,
               multi_w, lam, d_in=64, tau=0.07, n_init=4,
               latent=8, count_scale=20.0, n_clusters=0, cluster_strength=0.7, refresh="batch"):
    best_pccs, final_pccs = [], []
    for seed in seeds:
        spec = data_io.SynthSpec(
            n_spots=400, n_slides=2, latent_dim=latent, n_genes=60,
            rho=0.8, sigma=0.3, seed=100 + seed, d_in=d_in,
            count_scale=count_scale, n_clusters=n_clusters,
            cluster_strength=cluster_strength,
        )
        batches = data_io.batches_from_study(data_io.synth_generate(spec))
        mcfg = model.ModelConfig(
            n_genes=60, d_in=d_in, d=d, heads=4, neighbor_blocks=1,
            d_ff=2 * d, dropout=dropout,
        )
        tcfg = trainer.TrainConfig(
            lr=lr, batch_size=batch, epochs=epochs, seed=seed, k=k,
            lam=lam, tau=tau, tau_ig=tau, multi_ins_weight=multi_w,
            n_folds=2, kmeans_n_init=n_init, cluster_refresh=refresh,
        )
        plan = trainer.make_folds([(b.sample_id, b.patient_id) for b in batches], 2, seed)
        res = trainer.train_fold(0, plan, batches, mcfg, tcfg)
        best_pccs.append(res.best_pcc_a)
        final_pccs.append(res.history[-1].get("val_pcc_a", float("nan")))
    return {
        "label": label,
        "best_median": statistics.median(best_pccs),
        "final_median": statistics.median(final_pccs),
        "best": [round(p, 4) for p in best_pccs],
    }


def main():
    seeds = [int(s) for s in sys.argv[1].split(",")] if len(sys.argv) > 1 else [0]
    grid = dict(
        d=int(sys.argv[2]) if len(sys.argv) > 2 else 32,
        lr=float(sys.argv[3]) if len(sys.argv) > 3 else 2e-3,
        batch=int(sys.argv[4]) if len(sys.argv) > 4 else 200,
        k=int(sys.argv[5]) if len(sys.argv) > 5 else 8,
        dropout=float(sys.argv[6]) if len(sys.argv) > 6 else 0.1,
        latent=int(sys.argv[7]) if len(sys.argv) > 7 else 8,
        count_scale=float(sys.argv[8]) if len(sys.argv) > 8 else 20.0,
        epochs=int(sys.argv[9]) if len(sys.argv) > 9 else 50,
        n_clusters=int(sys.argv[10]) if len(sys.argv) > 10 else 0,
        cluster_strength=float(sys.argv[11]) if len(sys.argv) > 11 else 0.7,
        refresh=sys.argv[12] if len(sys.argv) > 12 else "batch",
    )
    t0 = time.time()
    configs = [
        ("plain", dict(multi_w=0.0, lam=0.0)),
        ("ms_only", dict(multi_w=1.0, lam=0.0)),
        ("cl_only", dict(multi_w=0.0, lam=0.8)),
        ("full", dict(multi_w=1.0, lam=0.8)),
    ]
    results = []
    for label, flags in configs:
        r = run_config(label, seeds, **grid, **flags)
        results.append(r)
        print(json.dumps(r), flush=True)
    by = {r["label"]: r["best_median"] for r in results}
    print(f"# grid={grid} seeds={seeds} elapsed={time.time()-t0:.0f}s")
    print(
        f"# plain<ms:{by['plain'] < by['ms_only']} plain<cl:{by['plain'] < by['cl_only']} "
        f"ms<full:{by['ms_only'] < by['full']} cl<full:{by['cl_only'] < by['full']}"
    )


if __name__ == "__main__":
    main()
