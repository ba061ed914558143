from __future__ import annotations

import io
import shutil
from dataclasses import replace

import pytest
import yaml

import tinymark.orchestrator as orch
from tinymark.device_sim import default_profile_path, load_profiles
from tinymark.errors import EmptySelection, SelectionError, TinymarkError
from tinymark.orchestrator import (
    BenchmarkJob,
    PipelineSelection,
    cache_key,
    default_selection,
    interactive_menu,
    plan_jobs,
    run_pipeline,
    suite_dir,
)
from tinymark.reporting import to_markdown


def _configs(tmp_path, *names):
    d = tmp_path / "configs"
    d.mkdir(exist_ok=True)
    for n in names:
        shutil.copy(suite_dir() / f"{n}.yaml", d / f"{n}.yaml")
    return d


def _sel(tmp_path, names, **kw):
    base = dict(
        variants=("basic", "int8_only"),
        backends=("interpreter-rt",),
        devices=("cm4f-sim",),
        config_dir=str(_configs(tmp_path, *names)),
        output_dir=str(tmp_path / "out"),
    )
    base.update(kw)
    return PipelineSelection(**base)


# -- job planning --------------------------------------------------------------------------


def test_single_job(tmp_path):
    jobs = plan_jobs(_sel(tmp_path, ["fc0"], variants=("basic",)))
    assert [j.key for j in jobs] == [("fc0", "basic", "interpreter-rt", "cm4f-sim")]
    assert jobs[0].status == "pending"


def test_product_of_eight(tmp_path):
    jobs = plan_jobs(_sel(tmp_path, ["fc0", "fc2"], backends=("interpreter-rt", "vendor-rt")))
    assert len(jobs) == 8
    assert len({j.key for j in jobs}) == 8
    assert all(j.status == "pending" for j in jobs)


def test_rnn_on_compiled_backend_is_skipped(tmp_path):
    jobs = plan_jobs(_sel(tmp_path, ["rnn_simple0"], backends=("interpreter-rt", "compiled-rt")))
    skipped = [j for j in jobs if j.status == "skipped"]
    assert {j.backend for j in skipped} == {"compiled-rt"}
    assert all(j.reason == "rnn unsupported" for j in skipped)


def test_job_plan_depends_only_on_selection(tmp_path):
    sel = _sel(tmp_path, ["fc0", "cnn1", "rnn_gru"], backends=("interpreter-rt", "crystal-rt"))
    a = plan_jobs(sel)
    b = plan_jobs(replace(sel, output_dir=str(tmp_path / "elsewhere")))
    assert a == b


def test_empty_selections(tmp_path):
    with pytest.raises(EmptySelection):
        plan_jobs(_sel(tmp_path, ["fc0"], variants=()))
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(EmptySelection):
        plan_jobs(_sel(tmp_path, [], config_dir=str(empty)))
    with pytest.raises(EmptySelection):
        run_pipeline(_sel(tmp_path, [], config_dir=str(empty)))


@pytest.mark.parametrize("stages", [("generate", "deploy"), ("optimize",), ("generate", "optimize", "deploy")])
def test_stage_dependencies(tmp_path, stages):
    with pytest.raises(SelectionError, match="requires"):
        plan_jobs(_sel(tmp_path, ["fc0"], stages=stages))


@pytest.mark.parametrize(
    "changes", [{"devices": ("pdp11",)}, {"backends": ("nope",)}, {"variants": ("int4",)}, {"stages": ("train",)}, {"workers": 0}]
)
def test_invalid_selection(tmp_path, changes):
    with pytest.raises(SelectionError):
        plan_jobs(_sel(tmp_path, ["fc0"], **changes))


# -- cache keys ---------------------------------------------------------------------------------


def test_cache_key_covers_every_input(monkeypatch, devices, backends):
    job = BenchmarkJob("m", "spec1", "int8", "interpreter-rt", "cm4f-sim")
    be, dev = backends["interpreter-rt"], devices["cm4f-sim"]
    key = cache_key(job, be, dev)
    assert key == cache_key(BenchmarkJob("m", "spec1", "int8", "interpreter-rt", "cm4f-sim"), be, dev)
    variants = [
        cache_key(replace(job, spec_hash="spec2"), be, dev),
        cache_key(replace(job, variant="16x8"), be, dev),
        cache_key(job, be.with_placement("ram"), dev),
        cache_key(job, backends["vendor-rt"], dev),
        cache_key(job, be, dev.with_fpu(False)),
        cache_key(job, be, devices["rxv2-sim"]),
    ]
    monkeypatch.setattr(orch, "__version__", "9.9.9")
    variants.append(cache_key(job, be, dev))
    assert len(set(variants + [key])) == len(variants) + 1


# -- running --------------------------------------------------------------------------------------


def test_run_writes_reports_and_artifacts(tmp_path):
    summary = run_pipeline(_sel(tmp_path, ["fc0", "rnn_simple0"]))
    assert summary.exit_code == 0
    assert len(summary.records) == 4 and all(r.ok for r in summary.records)
    out = tmp_path / "out"
    for sub in ("graphs", "variants", "plans", "trials", "cache"):
        assert any((out / sub).iterdir()), sub
    assert set(summary.report_paths) == {"json", "csv", "markdown"}
    basic = [r for r in summary.records if r.variant == "basic"]
    assert all(r.error == 0.0 for r in basic)
    for r in summary.records:
        assert r.arena_kb is not None and r.arena_estimate_kb is not None
        assert r.exe_time_std_ms == 0.0
    logs = list((out / "trials").iterdir())
    assert all(p.read_text().startswith("guess=") for p in logs)


def test_skipped_jobs_become_records(tmp_path):
    summary = run_pipeline(_sel(tmp_path, ["rnn_simple0"], backends=("compiled-rt",)))
    assert [r.status for r in summary.records] == ["Skipped", "Skipped"]
    assert all(r.reason == "rnn unsupported" for r in summary.records)
    assert summary.exit_code == 0


class _Interrupt(Exception):
    pass


def test_resume_after_interrupt(tmp_path):
    sel = _sel(tmp_path, ["fc0", "fc1", "fc2"])
    seen = []

    def stop_after_three(job, record):
        seen.append(job.key)
        if len(seen) == 3:
            raise _Interrupt

    with pytest.raises(_Interrupt):
        run_pipeline(sel, on_job_done=stop_after_three)
    resumed = run_pipeline(sel)
    assert resumed.cache_hits == 3
    fresh = run_pipeline(replace(sel, output_dir=str(tmp_path / "fresh")), resume=False)
    assert fresh.cache_hits == 0
    assert resumed.records == fresh.records
    assert (tmp_path / "out" / "reports" / "report.csv").read_bytes() == (tmp_path / "fresh" / "reports" / "report.csv").read_bytes()


def test_changed_profile_invalidates_cache(tmp_path):
    sel = _sel(tmp_path, ["fc0"])
    run_pipeline(sel)
    doc = yaml.safe_load(default_profile_path().read_text())
    doc["devices"]["cm4f-sim"]["clock_hz"] = 240000000
    prof = tmp_path / "profiles.yaml"
    prof.write_text(yaml.safe_dump(doc))
    again = run_pipeline(replace(sel, profile_path=str(prof)))
    assert again.cache_hits == 0
    assert run_pipeline(replace(sel, profile_path=str(prof))).cache_hits == 2


def test_parallel_matches_sequential(tmp_path):
    names = ["fc0", "fc3", "cnn1", "rnn_simple0"]
    seq = run_pipeline(_sel(tmp_path, names, output_dir=str(tmp_path / "seq")))
    par = run_pipeline(_sel(tmp_path, names, output_dir=str(tmp_path / "par"), workers=4))
    assert seq.records == par.records
    assert [j.key for j in seq.jobs] == [j.key for j in par.jobs]
    assert (tmp_path / "seq/reports/report.csv").read_bytes() == (tmp_path / "par/reports/report.csv").read_bytes()


def test_ram_overflow_is_a_dash_cell(tmp_path):
    doc = yaml.safe_load(default_profile_path().read_text())
    doc["devices"]["cm4f-sim"]["ram_capacity"] = 8 * 1024
    prof = tmp_path / "small.yaml"
    prof.write_text(yaml.safe_dump(doc))
    summary = run_pipeline(_sel(tmp_path, ["cnn2"], profile_path=str(prof)))
    statuses = {r.variant: r.status for r in summary.records}
    assert statuses["basic"] == "DeviceMemoryOverflow"
    md = to_markdown(summary.records)
    row = next(line for line in md.splitlines() if line.startswith("| basic |"))
    assert row.count("| - ") == 5
    assert summary.exit_code == 1


def test_job_errors_are_recorded(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise TinymarkError("kernel exploded")

    monkeypatch.setattr(orch, "run_job", boom)
    summary = run_pipeline(_sel(tmp_path, ["fc0"], variants=("basic",)))
    assert summary.records[0].status == "Error" and "kernel exploded" in summary.records[0].reason
    assert summary.exit_code == 1 and len(summary.failed) == 1


def test_config_diagnostics_fail_the_run(tmp_path):
    sel = _sel(tmp_path, ["fc0"], variants=("basic",))
    (tmp_path / "configs" / "broken.yaml").write_text("model_type: [\n")
    summary = run_pipeline(sel)
    assert [d[0] for d in summary.diagnostics] == ["broken.yaml"]
    assert summary.exit_code == 1
    assert len(summary.records) == 1


def test_without_deploy_no_device_work(tmp_path, monkeypatch):
    def no_device(*args, **kwargs):
        raise AssertionError("device work during a no-deploy run")

    monkeypatch.setattr(orch, "Deployer", no_device)
    monkeypatch.setattr(orch, "run_job", no_device)
    summary = run_pipeline(_sel(tmp_path, ["fc0", "cnn1"], stages=("generate", "optimize", "convert")))
    assert summary.jobs == [] and summary.records == []
    out = tmp_path / "out"
    assert not (out / "trials").exists() and not (out / "cache").exists()
    assert len(list((out / "plans").iterdir())) == 4
    assert len(list((out / "graphs").iterdir())) == 2


def test_generate_only_saves_base_graphs(tmp_path):
    run_pipeline(_sel(tmp_path, ["fc0"], stages=("generate",)))
    out = tmp_path / "out"
    assert len(list((out / "graphs").iterdir())) == 1
    assert not (out / "variants").exists()


def test_output_dir_env(monkeypatch):
    monkeypatch.setenv("EDGEMARK_OUT", "/tmp/elsewhere")
    assert default_selection().output_dir == "/tmp/elsewhere"
    assert default_selection(output_dir="explicit").output_dir == "explicit"
    monkeypatch.delenv("EDGEMARK_OUT")
    assert default_selection().output_dir == "tinymark-out"


# -- menu ---------------------------------------------------------------------------------------


def _menu(defaults, text, **kw):
    out = io.StringIO()
    return interactive_menu(defaults, io.StringIO(text), out, interactive=True, **kw), out.getvalue()


def test_menu_defaults_equal_run_all():
    defaults = default_selection()
    devices, backends = load_profiles()
    chosen, shown = _menu(defaults, "\n")
    assert chosen == defaults
    assert chosen.backends == tuple(backends) and chosen.devices == tuple(devices)
    assert chosen.stages == orch.STAGES and chosen.variants == orch.DEFAULT_VARIANTS
    assert "[x]" in shown


def test_menu_deselect_deploy():
    chosen, _ = _menu(default_selection(), "4\n\n")
    assert chosen.stages == ("generate", "optimize", "convert")


def test_menu_rejects_broken_dependency_then_quits():
    chosen, shown = _menu(default_selection(), "1\n\nq\n")
    assert chosen is None
    assert "invalid selection" in shown and "aborted" in shown


def test_menu_eof_aborts():
    assert _menu(default_selection(), "")[0] is None


def test_menu_toggles_variants():
    defaults = default_selection()
    # items 5.. are the variants; drop "basic" and "dynamic"
    chosen, _ = _menu(defaults, "5 6\n\n")
    assert chosen.variants == orch.DEFAULT_VARIANTS[2:]


def test_menu_ignores_garbage():
    chosen, shown = _menu(default_selection(), "zz 999\n\n")
    assert chosen == default_selection()
    assert "ignored 'zz'" in shown


def test_menu_yes_bypasses():
    defaults = default_selection()
    assert interactive_menu(defaults, io.StringIO(""), io.StringIO(), yes=True) == defaults


def test_menu_needs_a_terminal():
    with pytest.raises(SelectionError):
        interactive_menu(default_selection(), io.StringIO("\n"), io.StringIO(), interactive=False)
