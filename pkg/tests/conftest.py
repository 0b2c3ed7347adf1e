import numpy as np
import pytest
import torch

from transind.config import load_config

torch.set_num_threads(1)

TINY = [
    "model.backbone_widths=[8,16,32]",
    "model.mask_widths=[8,8,16]",
    "model.mask_dim=8",
    "model.decoder_widths=[16,8,8]",
    "model.n_heads=2",
    "model.enc_layers=1",
    "model.dec_layers=1",
    "data.patch_size=32",
    "data.overlap=16",
    "train.n_templates=2",
    "train.n_targets=2",
    "train.episodes_per_epoch=2",
    "train.epochs=2",
    "train.val_fraction=0.25",
    "train.lr=1e-3",
]


@pytest.fixture
def tiny_cfg():
    return load_config(overrides=TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_monuseg_xml(path, regions):
    """Minimal MoNuSeg-layout annotation with one Region per vertex list."""
    lines = ['<?xml version="1.0"?>', "<Annotations><Annotation><Regions>"]
    for i, verts in enumerate(regions):
        lines.append(f'<Region Id="{i + 1}"><Vertices>')
        lines += [f'<Vertex X="{x}" Y="{y}" Z="0"/>' for x, y in verts]
        lines.append("</Vertices></Region>")
    lines.append("</Regions></Annotation></Annotations>")
    path.write_text("\n".join(lines))


# -- acceptance summary: one PASS/FAIL line per criterion -------------------

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_A" not in report.nodeid:
        return
    crit = report.nodeid.split("::test_")[1].split("_")[0]
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.outcome != "passed":
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        if crit not in _ACCEPTANCE or status != "PASS":
            _ACCEPTANCE[crit] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[crit]
        terminalreporter.write_line(f"{crit} {status}  {detail}")
