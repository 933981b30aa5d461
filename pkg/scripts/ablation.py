"""Memory-passing x message variant matrix on the synthetic rule dataset.

    python3 scripts/ablation.py --epochs 30 --out runs/ablation
"""
import argparse
import itertools
import json
from pathlib import Path

from daemon_tkg.data import SynthSpec, add_inverse_quadruples, generate_synthetic
from daemon_tkg.evaluation import evaluate, model_scorer
from daemon_tkg.model import MPS_VARIANTS, MSG_VARIANTS
from daemon_tkg.training import TrainConfig, fit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mps", default=",".join(MPS_VARIANTS))
    ap.add_argument("--msg", default=",".join(MSG_VARIANTS))
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    args = ap.parse_args()

    ds = add_inverse_quadruples(generate_synthetic(SynthSpec(), 7))
    rows = []
    for mps, msg in itertools.product(args.mps.split(","), args.msg.split(",")):
        cfg = TrainConfig(dim=32, layers=2, history_length=3, max_epochs=args.epochs, seed=args.seed,
                          mps_variant=mps, msg_variant=msg)
        res = fit(ds, cfg)
        reports, _ = evaluate(ds, model_scorer(res.checkpoint.params, cfg.model_config(ds.num_relations)),
                              "test", cfg.history_length)
        f = reports["time-filtered"]
        rows.append({"mps": mps, "msg": msg, "valid_mrr": max(e["valid_mrr"] for e in res.log),
                     "test_mrr": f.mrr, "hits1": f.hits1, "hits3": f.hits3, "hits10": f.hits10})
        print(f"{mps:>6} {msg:<9} valid {rows[-1]['valid_mrr']:.4f} test {f.mrr:.4f}", flush=True)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
