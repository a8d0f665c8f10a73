import importlib

import pytest

pytestmark = pytest.mark.smoke

MODULES = ["streams", "jumps", "drivers", "deviation", "market", "equilibrium", "validate", "config", "cli"]


def test_version():
    """Package exposes a version string"""
    import dynamic_deviation

    assert dynamic_deviation.__version__.count(".") == 2


@pytest.mark.parametrize("name", MODULES)
def test_imports(name):
    """Every module imports cleanly"""
    importlib.import_module(f"dynamic_deviation.{name}")


def test_entry_point():
    from dynamic_deviation.cli import COMMANDS, main

    assert callable(main)
    assert "policy" in COMMANDS
