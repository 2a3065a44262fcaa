import pytest

from cpvdiag.fixtures import build_fixtures, fixture_path


@pytest.fixture(scope="module")
def rebuilt():
    return build_fixtures()


def test_bundled_files_match_generator(rebuilt):
    for name, text in rebuilt.items():
        assert fixture_path(name).read_text() == text, name


def test_no_stray_files(rebuilt):
    root = fixture_path("")
    shipped = {p.relative_to(root).as_posix() for p in root.rglob("*.csv")}
    assert shipped == set(rebuilt)
