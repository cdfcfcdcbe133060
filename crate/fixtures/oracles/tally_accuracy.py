"""Recounts accuracy_500.json: a prediction is correct when it equals the
gold label ignoring case."""
import json
from pathlib import Path

data = json.loads((Path(__file__).resolve().parent.parent / "accuracy_500.json").read_text())
correct = sum(p.upper() == g.upper() for p, g in zip(data["predictions"], data["gold"]))
assert correct == data["expected_correct"], (correct, data["expected_correct"])
print(correct, correct / len(data["gold"]))
