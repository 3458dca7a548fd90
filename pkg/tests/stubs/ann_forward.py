"""Pure-Python forward pass of a network stored as model/model.json.

Usage: ann_forward.py INPUT_CSV OUTPUT_FILE MODEL_DIR
"""
import json
import math
import os
import sys

input_file, output_file, model_dir = sys.argv[1:4]
with open(os.path.join(model_dir, "model", "model.json")) as fh:
    doc = json.load(fh)
with open(input_file) as fh:
    x = [float(line.split(",")[1]) for line in fh.read().splitlines()[1:]]

mean, std = doc["scaler"]["mean"], doc["scaler"]["std"]
z = [(xi - m) / s for xi, m, s in zip(x, mean, std)] + [1.0]
hidden = []
for row in doc["w_hidden"]:
    a = math.fsum(w * v for w, v in zip(row, z))
    hidden.append(1.0 / (1.0 + math.exp(-a)))
hidden.append(1.0)
w_out = doc["w_out"][0] if isinstance(doc["w_out"][0], list) else doc["w_out"]
y = math.fsum(w * h for w, h in zip(w_out, hidden))
with open(output_file, "w") as fh:
    fh.write(repr(y) + "\n")
