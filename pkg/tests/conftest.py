import os
import sys
from dataclasses import dataclass
from pathlib import Path

# Keep BLAS reductions single-threaded so training runs are reproducible
# bit-for-bit; must happen before numpy loads.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

sys.path.insert(0, str(Path(__file__).resolve().parent))

import pytest  # noqa: E402


@dataclass
class TrainedScenario:
    fixture: object
    model: object
    vocab: object
    idf: object
    settings_kwargs: dict


@pytest.fixture(scope="session")
def trained_scenario() -> TrainedScenario:
    """Sensitivity fixture with a converged preference model and IDF table."""
    from synthdata import sensitivity_fixture
    from kgrec.paths import compute_idf
    from kgrec.preference import UserVocab, build_training_data, init_preference, train_preference

    fx = sensitivity_fixture()
    vocab = UserVocab(s.user_id for s in fx.splits)
    train, valid, sets = build_training_data(fx.splits, fx.kg, vocab, fx.classes, seed=5)
    model = init_preference(len(vocab), 16, fx.classes, seed=5, dropout=0.2)
    train_preference(model, train, valid, epochs=2000, learning_rate=0.5, batch_size=32)
    idf = compute_idf(sets, fx.classes)
    settings_kwargs = dict(
        seed=5, k_paths=20, token_budget=2536, title_cap=10, relation_classes=fx.classes,
    )
    return TrainedScenario(fx, model, vocab, idf, settings_kwargs)
