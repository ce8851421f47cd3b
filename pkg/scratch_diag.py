import sys
import time

import numpy as np

from spikegraph.data import ModalityBundle, SkeletonTopology, preprocess_sequences, synthesize
from spikegraph.network import MkSgnModel, STUDENT_PLAN_TOY, TrainSettings, Trainer, evaluate
from spikegraph.tensor import Tensor

lr = float(sys.argv[1]) if len(sys.argv) > 1 else 0.05
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 16
seed = int(sys.argv[3]) if len(sys.argv) > 3 else 0
dropout = float(sys.argv[4]) if len(sys.argv) > 4 else 0.0
lr_step = int(sys.argv[5]) if len(sys.argv) > 5 else 50

seqs, _ = synthesize(4, samples_per_class=50, frames=48, seed=0)
topo = SkeletonTopology.ntu25()
bundle, labels = preprocess_sequences(seqs, target_t=16, topo=topo)
test_mask = np.zeros(len(labels), dtype=bool)
test_mask[::5] = True
tr_b = ModalityBundle(**{k: v[~test_mask] for k, v in bundle.as_dict().items()})
te_b = ModalityBundle(**{k: v[test_mask] for k, v in bundle.as_dict().items()})
tr_l, te_l = labels[~test_mask], labels[test_mask]

model = MkSgnModel(4, topo, plan=STUDENT_PLAN_TOY, rng=np.random.default_rng(seed),
                   smic_hidden=32, dropout=dropout)
settings = TrainSettings(lr=lr, epochs=epochs, batch_size=16, seed=seed,
                         early_stop_train_acc=0.995, lr_step_epoch=lr_step)
trainer = Trainer(model, tr_b, tr_l, settings)

t_start = time.time()
for epoch in range(epochs):
    t0 = time.time()
    h = trainer.run(epochs=1)[-1]
    w = model.fusion_weights(model.encode(
        {k: Tensor(v[:32]) for k, v in tr_b.as_dict().items()}))
    print(f"ep{epoch:02d} acc={h['train_acc']:.2f} loss={h['train_loss']:.3f} "
          f"w={np.round(w.w, 2)} ({time.time()-t0:.0f}s)", flush=True)
    if h["train_acc"] >= 0.995:
        break
res = evaluate(model, te_b, te_l)
print(f"heldout: {res['accuracy']:.2f} total {time.time()-t_start:.0f}s", flush=True)
