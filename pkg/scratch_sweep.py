import sys
import time

import numpy as np

from spikegraph.data import ModalityBundle, SkeletonTopology, preprocess_sequences, synthesize
from spikegraph.network import (MkSgnModel, STUDENT_PLAN_TOY, TrainSettings,
                                Trainer, evaluate)

lr = float(sys.argv[1])
bs = int(sys.argv[2])
epochs = int(sys.argv[3])
seed = int(sys.argv[4]) if len(sys.argv) > 4 else 0

seqs, _ = synthesize(4, samples_per_class=50, frames=48, seed=0)
topo = SkeletonTopology.ntu25()
bundle, labels = preprocess_sequences(seqs, target_t=16, topo=topo)
test_mask = np.zeros(len(labels), dtype=bool)
test_mask[::5] = True
tr_b = ModalityBundle(**{k: v[~test_mask] for k, v in bundle.as_dict().items()})
te_b = ModalityBundle(**{k: v[test_mask] for k, v in bundle.as_dict().items()})
tr_l, te_l = labels[~test_mask], labels[test_mask]
model = MkSgnModel(4, topo, plan=STUDENT_PLAN_TOY, rng=np.random.default_rng(seed),
                   smic_hidden=32)
settings = TrainSettings(lr=lr, epochs=epochs, batch_size=bs, seed=seed,
                         early_stop_train_acc=0.995)
trainer = Trainer(model, tr_b, tr_l, settings)
t0 = time.time()
hist = trainer.run()
dt = time.time() - t0
accs = [h["train_acc"] for h in hist]
res = evaluate(model, te_b, te_l)
print(f"lr={lr} bs={bs} seed={seed}: epochs_run={len(hist)} "
      f"acc_traj={[round(a, 2) for a in accs[::max(1, len(accs)//8)]]} "
      f"final_train={accs[-1]:.2f} heldout={res['accuracy']:.2f} "
      f"({dt:.0f}s, {dt/len(hist):.1f}s/ep)")
