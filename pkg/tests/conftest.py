import numpy as np
import pytest
import torch

from seal.expr_ingest import SpotTable, Stage


def make_table(values, genes=None, sample_id="S0", rows=None, cols=None, stage=Stage.RAW_COUNTS,
               patient_id=None, organ="tissue", domain_id=0):
    values = np.asarray(values, dtype=np.float64)
    n, g = values.shape
    genes = genes or [f"G{j}" for j in range(g)]
    if rows is None:
        rows = np.arange(n) // 8
        cols = 2 * (np.arange(n) % 8) + rows % 2
    return SpotTable(
        sample_id=sample_id,
        values=values,
        gene_names=list(genes),
        barcodes=[f"{sample_id}-{i}" for i in range(n)],
        array_row=np.asarray(rows),
        array_col=np.asarray(cols),
        xy_um=np.c_[np.asarray(cols) * 50.0, np.asarray(rows) * 86.6],
        patient_id=patient_id or sample_id,
        organ=organ,
        domain_id=domain_id,
        stage=stage,
    )


@pytest.fixture
def table_factory():
    return make_table


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


# criterion number -> (passed, title, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})")
