"""Calibration run for the capability pipeline.

Trains the three stages on freshly generated expert data and reports the
capability metrics with their ablations. Checkpoints and datasets land in
.cache/calib so repeated invocations can resume.

Usage: python3 scripts/calibrate.py [--fast] [--tag NAME] [--episodes N] ...
"""

import argparse
import json
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from rldx.envs import gen_dataset, load_dataset, make_env  # noqa: E402
from rldx.model import Policy, PolicyConfig  # noqa: E402
from rldx.trainer import StageConfig, evaluate, finetune, midtrain, pretrain  # noqa: E402

TASK_MODULES = {
    "conveyor": {"motion": True, "memory": False, "physics": False},
    "shell": {"motion": False, "memory": True, "physics": False},
    "probe": {"motion": False, "memory": False, "physics": True},
}


def dataset(root, kind, n, seed, **kw):
    out = os.path.join(root, f"{kind}_{n}_{seed}")
    if not os.path.exists(os.path.join(out, "manifest.json")):
        gen_dataset(kind, n, seed, out, **kw)
    return load_dataset(out)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tag", default="base")
    ap.add_argument("--episodes", type=int, default=256)
    ap.add_argument("--pretrain-steps", type=int, default=1500)
    ap.add_argument("--midtrain-steps", type=int, default=800)
    ap.add_argument("--finetune-steps", type=int, default=800)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--eval-episodes", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--skip-to", default="")
    ap.add_argument("--d", type=int, default=48)
    args = ap.parse_args()

    root = os.path.join(os.path.dirname(__file__), "..", ".cache", "calib-" + args.tag)
    os.makedirs(root, exist_ok=True)
    data_root = os.path.join(os.path.dirname(__file__), "..", ".cache", "data")

    data = {k: dataset(data_root, k, args.episodes, args.seed + i * 1000)
            for i, k in enumerate(("conveyor", "shell", "probe"))}

    def report(msg):
        print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)

    cfg = PolicyConfig(d=args.d, d_model=args.d, seed=args.seed)
    stem_pre = os.path.join(root, "pretrain")
    stem_mid = os.path.join(root, "midtrain")

    if os.path.exists(stem_pre + ".json") and args.skip_to in ("midtrain", "finetune", "eval"):
        policy = Policy.load(stem_pre)
        report("loaded pretrain checkpoint")
    else:
        policy = Policy(cfg)
        report(f"pretraining ({policy.ps.n_values()} params)")
        t0 = time.time()
        hist = pretrain(policy, {k: data[k] for k in ("conveyor", "shell")},
                        StageConfig("pretrain", steps=args.pretrain_steps,
                                    batch_size=args.batch, lr=args.lr,
                                    agnostic_frac=1 / 32, seed=args.seed))
        report(f"pretrain done in {time.time()-t0:.0f}s; "
               f"loss {hist[0]['loss']:.3f} -> {hist[-1]['loss']:.3f}")
        policy.save(stem_pre)

    if os.path.exists(stem_mid + ".json") and args.skip_to in ("finetune", "eval"):
        policy = Policy.load(stem_mid)
        report("loaded midtrain checkpoint")
    else:
        t0 = time.time()
        hist = midtrain(policy, data,
                        StageConfig("midtrain", steps=args.midtrain_steps,
                                    batch_size=args.batch, lr=args.lr * 0.5,
                                    modality_dropout=0.3,
                                    alignment_steps=max(1, args.midtrain_steps // 10),
                                    seed=args.seed + 1))
        report(f"midtrain done in {time.time()-t0:.0f}s; "
               f"loss {hist[0]['loss']:.3f} -> {hist[-1]['loss']:.3f}")
        policy.save(stem_mid)

    results = {}
    for kind in ("conveyor", "shell", "probe"):
        stem_ft = os.path.join(root, f"finetune_{kind}")
        if os.path.exists(stem_ft + ".json") and args.skip_to == "eval":
            ft = Policy.load(stem_ft)
            report(f"loaded finetune checkpoint for {kind}")
        else:
            ft = Policy.load(stem_mid)
            t0 = time.time()
            hist = finetune(ft, {kind: data[kind]},
                            StageConfig("finetune", steps=args.finetune_steps,
                                        batch_size=args.batch, lr=args.lr * 0.5,
                                        seed=args.seed + 2),
                            modules=TASK_MODULES[kind])
            report(f"finetune[{kind}] done in {time.time()-t0:.0f}s; "
                   f"loss {hist[0]['loss']:.3f} -> {hist[-1]['loss']:.3f}")
            ft.save(stem_ft)

        ev = args.eval_episodes
        t0 = time.time()
        if kind == "conveyor":
            full = evaluate(ft, kind, ev, seed=7000, env_kwargs={"speeds": (2,)})
            abl = evaluate(ft, kind, ev, seed=7000, env_kwargs={"speeds": (2,)},
                           modules={"motion": False, "memory": False, "physics": False},
                           offsets=(0,))
            seen = evaluate(ft, kind, ev, seed=7500)
            results[kind] = {"full_unseen": full.to_doc(), "ablated_unseen": abl.to_doc(),
                             "full_seen": seen.to_doc()}
        elif kind == "shell":
            full = evaluate(ft, kind, ev, seed=7000)
            abl = evaluate(ft, kind, ev, seed=7000,
                           modules={"motion": False, "memory": False, "physics": False})
            results[kind] = {"full": full.to_doc(), "ablated": abl.to_doc()}
        else:
            full = evaluate(ft, kind, ev, seed=7000)
            abl = evaluate(ft, kind, ev, seed=7000,
                           modules={"motion": False, "memory": False, "physics": False})
            results[kind] = {"full": full.to_doc(), "ablated": abl.to_doc()}
        report(f"eval[{kind}] in {time.time()-t0:.0f}s: "
               + json.dumps(results[kind]))

    with open(os.path.join(root, "results.json"), "w") as fh:
        json.dump(results, fh, indent=1)
    report("calibration complete")


if __name__ == "__main__":
    main()
