"""Calibration harness for the end-to-end directional-gain experiment."""
import sys
import time

import numpy as np

from ltdistill.augment import CropAugmentConfig
from ltdistill.data import LongTailSpec, balanced_split, gen_blobs, make_long_tail, dataset_hash
from ltdistill.experts import ExpertTrainConfig, train_expert
from ltdistill.initsel import assemble_init, build_pool, multi_round_select, score_pool, naive_init
from ltdistill.nn import ConvNetSpec
from ltdistill.optim import OptimConfig
from ltdistill.recalib import recalibrate, running_stats_bundle
from ltdistill.recovery import RecoveryConfig, recover
from ltdistill.students import (
    DistilledSet, StudentTrainConfig, evaluate, random_real_subset, relabel, train_student,
)

t_start = time.time()


def stamp(msg):
    print(f"[{time.time() - t_start:6.0f}s] {msg}", flush=True)


WIDTH = int(sys.argv[1]) if len(sys.argv) > 1 else 24
EXPERT_ITERS = int(sys.argv[2]) if len(sys.argv) > 2 else 500
REC_ITERS = int(sys.argv[3]) if len(sys.argv) > 3 else 300
EPOCHS = int(sys.argv[4]) if len(sys.argv) > 4 else 200
NOISE = float(sys.argv[5]) if len(sys.argv) > 5 else 0.28
AREA_MIN = float(sys.argv[6]) if len(sys.argv) > 6 else 0.3
JITTER = float(sys.argv[7]) if len(sys.argv) > 7 else 0.10
RING = float(sys.argv[8]) if len(sys.argv) > 8 else 0.0

source = gen_blobs(10, 230, (3, 16, 16), seed=1001, noise=NOISE, jitter=JITTER, ring_prob=RING)
test, remainder = balanced_split(source, 20, seed=1002)
train = make_long_tail(remainder, LongTailSpec(10, 200, 10.0, seed=1003))
stamp(f"data ready, counts={train.class_counts().tolist()}")
spec = ConvNetSpec(depth=3, width=WIDTH, in_shape=(3, 16, 16), num_classes=10)
aug_cfg = CropAugmentConfig(area_range=(AREA_MIN, 1.0), flip_prob=0.5)
ipc = 10


def expert_cfg(seed, debias=True):
    return ExpertTrainConfig(
        iterations=EXPERT_ITERS, batch_size=64,
        gamma1=0.25 if debias else 0.0, gamma2=1.0,
        q=1.0 if debias else 0.0, mixup_alpha=0.2, use_mixup=debias,
        optimizer=OptimConfig(kind="adam", lr=2e-3), seed=seed,
    )


def adapted_init(teacher, seed):
    pool = build_pool(train, 8, aug_cfg, seed)
    score_pool(teacher, pool, 256)
    sel = multi_round_select(pool, ipc)
    return assemble_init(sel, ipc, 10)


def run_students(distilled, kappa1, kappa2, tag):
    accs = []
    for s in (0, 1, 2):
        cfg = StudentTrainConfig(
            epochs=EPOCHS, batch_size=50, kappa1=kappa1, kappa2=kappa2,
            optimizer=OptimConfig(kind="adam", lr=2e-3), seed=9000 + s,
        )
        student = train_student(distilled, spec, cfg)
        rep = evaluate(student, test, seed=s)
        accs.append(rep.balanced)
    stamp(f"{tag}: balanced per-seed {[f'{a:.3f}' for a in accs]} mean {np.mean(accs):.4f}")
    return float(np.mean(accs))


def variant(observer, teacher, bundle, init_images, init_labels, tag):
    recovered, report = recover(
        init_images, observer, bundle,
        RecoveryConfig(iterations=REC_ITERS, lambda_cw=1.0,
                       optimizer=OptimConfig(kind="adam", lr=0.05), seed=7),
        labels=init_labels,
    )
    stamp(f"{tag}: recovery {report.initial_loss:.2f} -> {report.final_loss:.2f}")
    soft = relabel(teacher, recovered)
    ds = DistilledSet(images=recovered, hard_labels=init_labels, soft_labels=soft, ipc=ipc)
    agree = (ds.soft_argmax() == ds.hard_labels).mean()
    stamp(f"{tag}: soft/hard argmax agreement {agree:.2f}")
    return run_students(ds, 0.1, 1.0, tag)


stamp("training debiased experts")
obs_d = train_expert(train, spec, expert_cfg(42))
tea_d = train_expert(train, spec, expert_cfg(43))
stamp("training plain experts")
obs_p = train_expert(train, spec, expert_cfg(42, debias=False))
tea_p = train_expert(train, spec, expert_cfg(43, debias=False))
stamp(f"expert sanity: debiased teacher balanced={evaluate(tea_d.model, test).balanced:.3f} "
      f"plain teacher balanced={evaluate(tea_p.model, test).balanced:.3f}")

bundle_d = recalibrate(obs_d, train, 64)
bundle_p = recalibrate(obs_p, train, 64)
bundle_raw = running_stats_bundle(obs_d, 10, dataset_hash_=dataset_hash(train))

init_d = adapted_init(tea_d, 2001)
init_p = adapted_init(tea_p, 2001)
init_n = naive_init(train, ipc, aug_cfg, 2002)
stamp("inits ready")

results = {}
# diagnostic: init + soft labels without recovery
soft_init = relabel(tea_d, init_d[0])
ds_init = DistilledSet(images=init_d[0], hard_labels=init_d[1], soft_labels=soft_init, ipc=ipc)
run_students(ds_init, 0.1, 1.0, "diag_init_only")
results["full"] = variant(obs_d, tea_d, bundle_d, *init_d, tag="full")
results["no_debias"] = variant(obs_p, tea_p, bundle_p, *init_p, tag="no_debias")
results["no_recalib"] = variant(obs_d, tea_d, bundle_raw, *init_d, tag="no_recalib")
results["no_init"] = variant(obs_d, tea_d, bundle_d, *init_n, tag="no_init")

baseline_ds = random_real_subset(train, ipc, seed=3003)
results["baseline"] = run_students(baseline_ds, 1.0, 0.0, "baseline")

stamp("==== summary ====")
for k, v in results.items():
    print(f"  {k:12s}: {v:.4f}")
print(f"  full - baseline = {results['full'] - results['baseline']:+.4f} (need >= +0.05)")
for k in ("no_debias", "no_recalib", "no_init"):
    print(f"  full - {k:10s} = {results['full'] - results[k]:+.4f} (need >= +0.01)")
stamp(f"total runtime {(time.time() - t_start) / 60:.1f} min (budget 30)")
