import pytest

from bbadvisor.sim import PatientParams, make_cohort

# criterion number -> (name, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture(scope="session")
def cohort3():
    return make_cohort(3, 42)


@pytest.fixture(scope="session")
def cohort10():
    return make_cohort(10, 42)


@pytest.fixture(scope="session")
def nominal():
    """A mid-range patient (not screened)."""
    return PatientParams(body_weight=70.0, Gb=125.0, Ib=10.0, p1=0.02, p2=0.02, p3=2e-5,
                         n_clr=0.15, t_max_rapid=55.0, t_max_long=650.0, t_max_gut=45.0,
                         f_carb=0.9, Vg=1.6, Vi=120.0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {name} | {detail}")
