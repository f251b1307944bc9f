"""Train two small classifiers and compare image-domain attacks on them.

Run:  python3 demos/02_train_and_attack.py [out_dir]

A reduced dataset (100 training pulses per class) keeps this under a few
minutes on one core. Adversarial images are crafted on tinyA and scored on
tinyA itself (white-box) and on tinyC (transfer). Expect every iterative
attack to fool tinyA nearly always, while the transfer column separates
the methods: the input-diversity and smoothed-gradient variant carries
over to the unseen model far better than plain PGD.
"""

import sys
from pathlib import Path

import numpy as np

from tfadv import nn
from tfadv.attacks import AttackConfig, attack_batch
from tfadv.evaluation import TRAIN_LR, triptych
from tfadv.render import receive, write_image
from tfadv.waveforms import generate_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/02")
out.mkdir(parents=True, exist_ok=True)

train = generate_dataset(100, seed=3, split=0)
test = generate_dataset(30, seed=3, split=1)
x_tr, x_te = receive(train.samples()), receive(test.samples())
y_tr, y_te = train.labels, test.labels

models = {}
for arch in ("tinyA", "tinyC"):
    m, hist = nn.train(nn.init_model(arch, 0), x_tr, y_tr, epochs=15, lr=TRAIN_LR[arch])
    models[arch] = m
    print(f"{arch}: {m.arch.n_params} parameters, test accuracy "
          f"{100 * nn.accuracy(m, x_te, y_te):.1f}%")

src = models["tinyA"]
cfg = AttackConfig()
print(f"\nattack budget eps={cfg.epsilon}/255, step {cfg.alpha}/255, {cfg.iterations} iterations")
print(f"{'method':8s} {'white-box':>10s} {'transfer':>10s} {'mean l2':>9s}")
for method in ("fgsm", "pgd", "ditimi", "cw"):
    adv, _ = attack_batch(method, src, x_te, y_te, cfg, indices=np.arange(len(x_te)))
    rates = []
    for victim in models.values():
        ok = victim.predict(x_te) == y_te
        rates.append(100 * np.mean(victim.predict(adv)[ok] != y_te[ok]))
    l2 = np.sqrt((((adv - x_te) * 255) ** 2).sum(axis=(1, 2, 3))).mean()
    print(f"{method:8s} {rates[0]:9.1f}% {rates[1]:9.1f}% {l2:9.1f}")
    write_image(out / f"{method}_sample0", triptych(x_te[0], adv[0]))
