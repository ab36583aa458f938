from tset.rng import ByteStream


def test_same_seed_same_stream():
    a = ByteStream(7)
    b = ByteStream(7)
    assert a.take(64) == b.take(64)


def test_different_seeds_differ():
    assert ByteStream(1).take(32) != ByteStream(2).take(32)


def test_chunking_is_transparent():
    whole = ByteStream(5).take(48)
    s = ByteStream(5)
    assert s.take(16) + s.take(32) == whole


def test_fork_independent_of_parent_consumption():
    a = ByteStream(9)
    b = ByteStream(9)
    b.take(1000)
    assert a.fork("child").take(32) == b.fork("child").take(32)


def test_fork_labels_distinct():
    s = ByteStream(9)
    assert s.fork("x").take(32) != s.fork("y").take(32)


def test_nested_forks_path_dependent():
    s = ByteStream(9)
    assert s.fork("a").fork("b").take(16) != s.fork("b").fork("a").take(16)


def test_take_zero():
    assert ByteStream(1).take(0) == b""
