# Train the two-branch model on a small synthetic colon set and inspect it.
# Takes well under a minute on one CPU core.

import numpy as np

from uqdepth import ModelConfig, TrainConfig, generate_toy_colon, train
from uqdepth.trainer import evaluate, mean_report, model_from_checkpoint, predict, split_train_val

samples = generate_toy_colon(120, 64, seed=11)
config = TrainConfig(epochs=4, pretrain_epochs=2, seed=11)
result = train(samples, config, ModelConfig(input_size=64))

print("fine-tune epoch losses:", [round(x, 4) for x in result.checkpoint.history["epoch_loss"]])
print("held-out delta1 %.3f  abs_rel %.3f" % (result.val_report.delta1, result.val_report.abs_rel))

model = model_from_checkpoint(result.checkpoint)
_, val = split_train_val(samples, config.val_fraction)
for which in ("depth_local", "depth_global", "depth_fused"):
    print(f"{which:13s} abs_rel {mean_report(evaluate(model, val, which=which)).abs_rel:.4f}")

# where does the model trust the global branch more?
_, out = next(predict(model, val[:1]))
w_g = out.w_global[0, 0].numpy()
print("w_global range %.4f .. %.4f, mean %.4f" % (w_g.min(), w_g.max(), np.mean(w_g)))
