"""Scratch: wire-up smoke test + step timing + convergence probe."""
import time

import numpy as np

from spikegraph.data import SkeletonTopology, preprocess_sequences, synthesize
from spikegraph.network import (LossWeights, MkSgnModel, STUDENT_PLAN_TOY,
                                TrainSettings, Trainer, evaluate)

t0 = time.time()
seqs, _ = synthesize(4, samples_per_class=50, frames=48, seed=0)
topo = SkeletonTopology.ntu25()
bundle, labels = preprocess_sequences(seqs, target_t=16, topo=topo)
print(f"data: {time.time()-t0:.1f}s, bundle joint shape {bundle.joint.shape}")

# split: just take every 5th for test
test_mask = np.zeros(len(labels), dtype=bool)
test_mask[::5] = True
tr = {k: v[~test_mask] for k, v in bundle.as_dict().items()}
te = {k: v[test_mask] for k, v in bundle.as_dict().items()}
from spikegraph.data import ModalityBundle
tr_b, te_b = ModalityBundle(**tr), ModalityBundle(**te)
tr_l, te_l = labels[~test_mask], labels[test_mask]
print("train/test:", len(tr_l), len(te_l))

model = MkSgnModel(4, topo, plan=STUDENT_PLAN_TOY, rng=np.random.default_rng(0))
settings = TrainSettings(lr=0.1, epochs=200, batch_size=16, seed=0,
                         early_stop_train_acc=0.995)
trainer = Trainer(model, tr_b, tr_l, settings)

t0 = time.time()
m = trainer.train_step({k: __import__('spikegraph.tensor', fromlist=['Tensor']).Tensor(v[:16]) for k, v in tr_b.as_dict().items()}, tr_l[:16])
print(f"first step: {time.time()-t0:.2f}s, metrics: l_task={m['l_task']:.3f} acc={m['acc']:.2f}")
t0 = time.time()
for _ in range(3):
    m = trainer.train_step({k: __import__('spikegraph.tensor', fromlist=['Tensor']).Tensor(v[:16]) for k, v in tr_b.as_dict().items()}, tr_l[:16])
print(f"steady step: {(time.time()-t0)/3:.2f}s")

t0 = time.time()
hist = trainer.run(epochs=30)
dt = time.time() - t0
for h in hist[::max(1, len(hist)//10)]:
    print(h)
print(hist[-1])
print(f"30-epoch budget: {dt:.1f}s ({dt/len(hist):.1f}s/epoch)")
res = evaluate(model, te_b, te_l)
print("heldout acc:", res["accuracy"])
