"""Train the tiny network on synthetic small targets and score it.

Twenty 64x64 images, each with one to three faint Gaussian targets of a few
pixels. The tiny model (depth 2, base 8) should fit them almost perfectly
within 200 epochs; on a single CPU core that takes several minutes, so pass a
smaller epoch count for a quick look.

    python demos/03_synthetic_overfit.py [epochs] [out_dir]
"""
import sys
import time
from pathlib import Path

from mscanet import NetworkConfig, SynthConfig, TrainConfig, build_mscanet, evaluate, synth_generate, train
from mscanet.train_eval import predict, write_overlays

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 200
out = Path(sys.argv[2]) if len(sys.argv) > 2 else Path("demo_overfit")

samples = synth_generate(SynthConfig(n_images=20, size=(64, 64), seed=0))
print("target pixels per image:", [int(s.mask.sum()) for s in samples])

for name, flags in [("baseline U-Net", dict(use_mseda=False, use_pcbam=False, use_cab=False)), ("MSCA-Net", {})]:
    model = build_mscanet(NetworkConfig(depth=2, base_channels=8, **flags), seed=0)
    start = time.perf_counter()
    train(model, samples, TrainConfig(epochs=epochs, batch_size=4, checkpoint_every=max(epochs // 4, 1)),
          out / name.split()[0].lower())
    report = evaluate(model, samples)
    print(f"{name:<15} {report.summary()}   ({time.perf_counter() - start:.0f} s)")

write_overlays(samples[:4], predict(model, samples[:4]), 0.5, out / "overlays")
print("overlays (red = prediction, green = ground truth) in", out / "overlays")
