import pytest

from dppo.config import RunConfig, dumps


def tiny_run(**sections) -> RunConfig:
    """A run small enough for unit tests: few envs, short horizon, small nets
    and grids. ``sections`` maps section names to override dicts."""
    run = RunConfig()
    run = run.with_section("terrain", width_cells=120, height_cells=80, origin_y=-2.0)
    run = run.with_section("mapping", width_cells=60, height_cells=40, origin_y=-2.0, rays_per_scan=60)
    run = run.with_section("net", conv_channels=(2, 2), latent_dim=8, history_hidden=(8,), trunk_hidden=(16,))
    run = run.with_section("env", episode_len=20)
    run = run.with_section("stage", num_envs=3, horizon=6, updates=2, checkpoint_every=0)
    run = run.with_section("ppo", epochs=1, minibatch=8)
    run = run.with_section("eval", episodes=2, episode_len=15)
    for name, kw in sections.items():
        run = run.with_section(name, **kw)
    return run


@pytest.fixture
def write_config(tmp_path):
    def write(run: RunConfig, name="run.cfg"):
        p = tmp_path / name
        p.write_text(dumps(run), encoding="utf-8")
        return p
    return write


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
