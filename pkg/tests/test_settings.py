import logging
import os

from config.settings import AppConfig


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("PWLAB_THREADS", "3")
    assert AppConfig().threads == 3
    monkeypatch.setenv("PWLAB_THREADS", "0")
    assert AppConfig().threads == 1


def test_unparsable_thread_count_warns(monkeypatch, caplog):
    monkeypatch.setenv("PWLAB_THREADS", "many")
    with caplog.at_level(logging.WARNING, logger="config.settings"):
        assert AppConfig().threads == (os.cpu_count() or 1)
    assert "PWLAB_THREADS='many'" in caplog.text


def test_unset_thread_count_uses_cpu_count(monkeypatch, caplog):
    monkeypatch.delenv("PWLAB_THREADS", raising=False)
    with caplog.at_level(logging.WARNING, logger="config.settings"):
        assert AppConfig().threads == (os.cpu_count() or 1)
    assert not caplog.records
