# -*- coding: utf-8 -*-

try:
    from pfpn.config import Config
except ModuleNotFoundError:
    print("ModuleNotFoundError: Attempting to import from parent directory.")
    import os, sys
    sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

    from pfpn.config import Config

import json

from pfpn.profiler import ArchBuilder, Profiler
from pfpn.utils import Utils


config_file = "config.env"
config = Config(config_file)
Utils.configure_logging()

OUTPUT_DIR = config.OUTPUT_DIR / "profiling"
OUTPUT_DIR.mkdir(parents=True, exist_ok=True)
print(f"OUTPUT_DIR: {OUTPUT_DIR}")

# the 2-megapixel extent used for the headline comparison, plus a smaller one
IMAGES = [(1152, 1728), (512, 1024)]

for height, width in IMAGES:
    rows = Profiler.compare_variants(image=(height, width))
    print(f"\nimage {height}x{width}")
    print(Profiler.render_rows(rows, "text"))
    with open(OUTPUT_DIR / f"compare_{height}x{width}.csv", "w") as f:
        f.write(Profiler.render_rows(rows, "csv"))

# full semantic FPN network, layer by layer
report = Profiler.profile(ArchBuilder.build_arch("r101-fpn"))
with open(OUTPUT_DIR / "r101_fpn_semantic.json", "w") as f:
    f.write(report.render("json", per_layer=True))

head = sum(layer.multiply_adds for layer in report.layers if layer.name.startswith("head."))
summary = {
    "multiply_adds": report.multiply_adds,
    "head_multiply_adds": head,
    "head_share": head / report.multiply_adds,
}
print(json.dumps(summary, indent=2))
