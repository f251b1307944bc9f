"""Turn an image-domain attack into a transmittable waveform.

Run:  python3 demos/03_stds_jamming_waveform.py [out_dir]

The STDS attack never edits pixels. It nudges the complex STFT of the
received pulse, pushes the change through the colormap renderer into the
classifier, and finally inverts the edited grid back to a real waveform.
The only verdict that counts is the replay: the waveform is received
again from scratch, so the renderer derives fresh normalisation constants.
"""

import sys
from pathlib import Path

import numpy as np

from tfadv import nn
from tfadv.evaluation import TRAIN_LR, triptych
from tfadv.render import receive, write_image
from tfadv.stds import StdsConfig, replay_verify, stds_outcomes
from tfadv.waveforms import CLASS_NAMES, TimeSignal, generate_dataset, write_signal

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/03")
out.mkdir(parents=True, exist_ok=True)

train = generate_dataset(100, seed=4, split=0)
test = generate_dataset(5, seed=4, split=1)
model, _ = nn.train(nn.init_model("tinyA", 0), receive(train.samples()), train.labels,
                    epochs=15, lr=TRAIN_LR["tinyA"])

x, y = test.samples(), test.labels
cfg = StdsConfig()
print(f"STDS: relative step {cfg.lr}, up to {cfg.iterations} iterations, "
      f"replay check every {cfg.check_every}")
for i, o in enumerate(stds_outcomes(model, x, y, cfg)):
    pred, fooled = replay_verify(model, o.adv_signal, y[i])
    write_signal(out / f"adv_{i:02d}.tfsig", TimeSignal(o.adv_signal, int(y[i])))
    write_image(out / f"stds_{i:02d}", triptych(o.tf_image_clean.pixels, o.tf_image_adv.pixels))
    snr = 20 * np.log10(np.linalg.norm(x[i]) / max(np.linalg.norm(o.noise_signal), 1e-300))
    print(f"{CLASS_NAMES[y[i]]:7s} -> {CLASS_NAMES[pred]:7s} fooled={fooled!s:5s} "
          f"after {o.iterations_used:3d} its, signal-to-jamming {snr:5.1f} dB, "
          f"image l2 {o.l2_image:6.1f}")
