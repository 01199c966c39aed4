"""Regenerate tests/fixtures/session.json from a real scripted server session.

Trains a small model on the toy corpus, starts the HTTP app in-process, runs
a five-exchange session, and records every response the console would see.

Usage: python3 frontend/scripts/generate_fixture.py
"""

import json
import sys
import tempfile
from pathlib import Path

from fastapi.testclient import TestClient

sys.path.insert(0, str(Path(__file__).resolve().parents[2] / "tests"))
from toycorpus import toy_corpus, toy_vocab  # noqa: E402

from dialoflow.data import encode_dialogue  # noqa: E402
from dialoflow.model import ModelConfig  # noqa: E402
from dialoflow.server import create_app  # noqa: E402
from dialoflow.training import TrainConfig, train  # noqa: E402

OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "session.json"
SCRIPT = [f"t{i} w{i} w{i + 1}" for i in range(5)]


def main() -> None:
    corpus = toy_corpus()
    vocab = toy_vocab(corpus)
    model_cfg = ModelConfig(
        d_model=32, n_layers=1, n_heads=2, d_ff=64, vocab_size=vocab.size,
        max_positions=64, max_utterances=16, dropout=0.0,
    )
    train_cfg = TrainConfig(
        learning_rate=5e-3, warmup_steps=20, total_steps=120, batch_size=10,
        seed=0, checkpoint_interval=120,
    )
    encoded = [encode_dialogue(s, vocab, model_cfg.max_positions) for s in corpus]
    with tempfile.TemporaryDirectory() as tmp:
        result = train(encoded, vocab, model_cfg, train_cfg, tmp)
        app = create_app(result["final_checkpoint"])
        with TestClient(app) as client:
            created = client.post("/sessions", json={"max_new_tokens": 8}).json()
            sid = created["session_id"]
            exchanges = []
            for text in SCRIPT:
                body = client.post(f"/sessions/{sid}/message", json={"text": text}).json()
                exchanges.append({"user_text": text, "response": body})
            trajectory = client.get(f"/sessions/{sid}/trajectory").json()

    OUT.write_text(
        json.dumps({"exchanges": exchanges, "trajectory": trajectory}, indent=2) + "\n",
        encoding="utf-8",
    )
    print(f"wrote {OUT} with {len(exchanges)} exchanges")


if __name__ == "__main__":
    main()
