"""Sweep expert-training knobs; compare debiased vs plain teachers."""
import time

import numpy as np

from ltdistill.data import LongTailSpec, balanced_split, gen_blobs, make_long_tail
from ltdistill.experts import ExpertTrainConfig, train_expert
from ltdistill.nn import ConvNetSpec
from ltdistill.optim import OptimConfig
from ltdistill.students import evaluate

NOISE, JITTER = 0.5, 0.16
source = gen_blobs(10, 230, (3, 16, 16), seed=1001, noise=NOISE, jitter=JITTER)
test, remainder = balanced_split(source, 20, seed=1002)
train = make_long_tail(remainder, LongTailSpec(10, 200, 10.0, seed=1003))
spec = ConvNetSpec(depth=3, width=24, in_shape=(3, 16, 16), num_classes=10)

t0 = time.time()

def run(tag, **kw):
    cfg = ExpertTrainConfig(
        batch_size=64, optimizer=OptimConfig(kind="adam", lr=2e-3), seed=43, **kw
    )
    ck = train_expert(train, spec, cfg)
    rep = evaluate(ck.model, test)
    tail = rep.per_class[7:].mean()
    head = rep.per_class[:3].mean()
    print(
        f"[{time.time()-t0:5.0f}s] {tag:34s} balanced={rep.balanced:.3f} "
        f"head={head:.3f} tail={tail:.3f}",
        flush=True,
    )

run("plain-CE it500", iterations=500, gamma1=0.0, q=0.0, use_mixup=False)
run("plain-CE it900", iterations=900, gamma1=0.0, q=0.0, use_mixup=False)
run("debias a1.0 g0.5 q0.5 it500", iterations=500)
run("debias a0.2 g0.25 q0.5 it500", iterations=500, mixup_alpha=0.2, gamma1=0.25)
run("debias a0.2 g0.25 q1.0 it500", iterations=500, mixup_alpha=0.2, gamma1=0.25, q=1.0)
run("debias a0.2 g0.25 q0.5 it900", iterations=900, mixup_alpha=0.2, gamma1=0.25)
run("debias a0.3 g0.1 q1.0 it900", iterations=900, mixup_alpha=0.3, gamma1=0.1, q=1.0)
run("debias a0.2 g0.0 q0.5 it500 (mix only)", iterations=500, mixup_alpha=0.2, gamma1=0.0)
