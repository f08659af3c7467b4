"""The gradient-check suites themselves: pass on a fresh build, catch a
deliberately corrupted backward rule, and run through the CLI."""

import numpy as np
import pytest

from uvx import autodiff as ad
from uvx import gradcheck
from uvx.cli import main


def test_op_suite_passes_at_tolerance():
    ok, report = gradcheck.run_op_suite(tol=1e-5)
    assert ok
    assert len(report) >= 20     # every required op kind is represented


def test_corrupted_backward_is_detected(monkeypatch):
    def wrong_vjp(y, g):
        return g * y * (1.0 - y) * 1.01
    monkeypatch.setattr(ad, "_sigmoid_vjp", wrong_vjp)
    ok, report = gradcheck.run_op_suite(tol=1e-5)
    assert not ok
    bad = {name for name, _, passed in report if not passed}
    assert "sigmoid" in bad


def test_end_to_end_chain_within_tolerance():
    ok, worst, checked = gradcheck.run_end_to_end(tol=1e-3)
    assert ok, f"worst rel err {worst}"
    names = {name for name, _, _ in checked}
    assert "fields/sdf" in names and "fields/sem" in names


def test_gradcheck_cli_exit_codes(monkeypatch, capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "end-to-end" in out

    def wrong_vjp(y, g):
        return g * 1.05
    monkeypatch.setattr(ad, "_sigmoid_vjp", wrong_vjp)
    assert main(["gradcheck"]) == 3      # numerical failure exit code
