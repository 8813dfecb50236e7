import time
from pathlib import Path

import numpy as np
import pytest

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist5k"

# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mnist_pipeline():
    """Primary training on 9 MNIST digits, decomposition at beta 0.5 and fine-tuning.

    The held-out digit is drawn once from PCG64(0). Configs are the bundled
    defaults the CLI uses.
    """
    from dictshot import architectures, data
    from dictshot.cli import load_config
    from dictshot.engine import evaluate, train, transform_model

    held_out = int(np.random.Generator(np.random.PCG64(0)).integers(10))
    start = time.perf_counter()
    train_ds, test_ds = data.load_mnist_dir(MNIST_DIR)
    old_train, old_test, pool = data.split_old_new(train_ds, test_ds, [held_out])
    train_cfg = load_config("train", "train")
    dense = architectures.build("lenet", 9, seed=train_cfg.seed, class_labels=old_train.label_names)
    train(dense, old_train, train_cfg)
    dense_acc = evaluate(dense, old_test).top1

    ft_cfg = load_config("finetune", "finetune")
    dec = transform_model(dense, {"conv": 0.5, "fc": 0.5})
    dec_acc_before = evaluate(dec, old_test).top1
    train(dec, old_train, ft_cfg)
    dec_acc = evaluate(dec, old_test).top1
    return {
        "held_out": held_out,
        "train": train_ds,
        "test": test_ds,
        "old_train": old_train,
        "old_test": old_test,
        "pool": pool,
        "dense": dense,
        "dense_acc": dense_acc,
        "decomposed": dec,
        "dec_acc_before_ft": dec_acc_before,
        "dec_acc": dec_acc,
        "train_config": train_cfg,
        "finetune_config": ft_cfg,
        "seconds": time.perf_counter() - start,
    }
