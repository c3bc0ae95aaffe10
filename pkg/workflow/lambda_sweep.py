# -*- coding: utf-8 -*-

try:
    from pfpn.config import Config
except ModuleNotFoundError:
    print("ModuleNotFoundError: Attempting to import from parent directory.")
    import os, sys
    sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

    from pfpn.config import Config

from pfpn.losses import Losses
from pfpn.train_demo import DemoTrainer, TrainConfig
from pfpn.utils import Utils


config_file = "config.env"
config = Config(config_file)
Utils.configure_logging()

OUTPUT_FILE = config.OUTPUT_DIR / "lambda_sweep.csv"
config.OUTPUT_DIR.mkdir(parents=True, exist_ok=True)
print(f"OUTPUT_FILE: {OUTPUT_FILE}")

train_config = TrainConfig.from_config(config)
grid = Losses.grid(config.LAMBDA_GRID)
print(f"sweeping {len(grid)} (lambda_i, lambda_s) pairs with {train_config.steps} steps each")

rows = DemoTrainer.sweep(train_config, grid, threads=config.PFPN_THREADS)
Losses.write_sweep_csv(OUTPUT_FILE, rows)

failed = [row for row in rows if row.error is not None]
if failed:
    print(f"{len(failed)} of {len(rows)} runs failed:")
    for row in failed:
        print(f"  lambda_i={row.lambda_i} lambda_s={row.lambda_s}: {row.error}")

best = max((row for row in rows if row.error is None), key=lambda row: row.metrics.get("miou", 0.0), default=None)
if best is not None:
    print(f"best mIoU {best.metrics['miou']:.2f} at lambda_i={best.lambda_i} lambda_s={best.lambda_s}")
