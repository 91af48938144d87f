"""Bundled synthetic test feeders.

Line impedances are built from the public IEEE 13/37 node line
configurations (ohm per mile) and segment lengths, then converted to
per-unit.  Only the three-phase primary is modelled; the "13" and "37"
feeders are trimmed/modified versions, not the full IEEE systems.
"""

import numpy as np

from .netmodel import FeederModel, Line, LineParameters, LoadSpec

FT_PER_MILE = 5280.0

# ohm/mile, symmetric: (upper R, upper X) in aa, ab, ac, bb, bc, cc order
CONFIGS = {
    "601": ((0.3465, 0.1560, 0.1580, 0.3375, 0.1535, 0.3414), (1.0179, 0.5017, 0.4236, 1.0478, 0.3849, 1.0348)),
    "602": ((0.7526, 0.1580, 0.1560, 0.7475, 0.1535, 0.7436), (1.1814, 0.4236, 0.5017, 1.1983, 0.3849, 1.2112)),
    "721": ((0.2926, 0.0673, 0.0337, 0.2646, 0.0673, 0.2926), (0.1973, -0.0368, -0.0417, 0.1900, -0.0368, 0.1973)),
    "722": ((0.4751, 0.1629, 0.1234, 0.4488, 0.1629, 0.4751), (0.2973, -0.0326, -0.0607, 0.2678, -0.0326, 0.2973)),
    "723": ((1.2936, 0.4871, 0.4585, 1.3022, 0.4871, 1.2936), (0.6713, 0.2111, 0.1521, 0.6326, 0.2111, 0.6713)),
    "724": ((2.0952, 0.5204, 0.4926, 2.1193, 0.5204, 2.0952), (0.7758, 0.2738, 0.2123, 0.7284, 0.2738, 0.7758)),
}


def line_params_pu(config, length_ft, z_base):
    r, x = CONFIGS[config]
    k = length_ft / FT_PER_MILE / z_base
    return LineParameters(tuple(v * k for v in r), tuple(v * k for v in x))


def _build(name, nodes, segments, loads, base_kv, base_kva, peak_kw):
    z_base = base_kv**2 * 1000.0 / base_kva
    lines = tuple(
        Line(f"{a}-{b}", a, b, line_params_pu(cfg, length, z_base)) for a, b, cfg, length in segments
    )
    specs = tuple(
        LoadSpec(mid, node, conn, phase) for mid, node, conn, phase, _ in loads
    )
    model = FeederModel(tuple(nodes), lines, specs, base_kv, base_kva, name)
    # nominal peak of every load (kW) scaled so the coincident nominal sum is peak_kw
    nominal = np.array([kw for *_, kw in loads], dtype=float)
    return model, nominal * (peak_kw / nominal.sum())


def two_node():
    return _build(
        "two_node",
        ["s", "n1"],
        [("s", "n1", "601", 2000)],
        [("m1", "n1", "AN", "a", 300)],
        4.16, 5000.0, 300.0,
    )


def four_node():
    return _build(
        "four_node",
        ["s", "n1", "n2", "n3"],
        [("s", "n1", "601", 2000), ("n1", "n2", "601", 2500), ("n1", "n3", "602", 1500)],
        [
            ("m1", "n1", "BN", "a", 250),
            ("m2", "n2", "AN", "a", 400),
            ("m3", "n2", "BC", "a", 350),
            ("m4", "n3", "ABC", "c", 600),
            ("m5", "n3", "CA", "a", 300),
        ],
        4.16, 5000.0, 1800.0,
    )


def eight_node():
    return _build(
        "eight_node",
        ["s", "n1", "n2", "n3", "n4", "n5", "n6", "n7"],
        [
            ("s", "n1", "601", 1500),
            ("n1", "n2", "601", 1200),
            ("n2", "n3", "602", 800),
            ("n2", "n4", "601", 1000),
            ("n1", "n5", "602", 900),
            ("n5", "n6", "602", 700),
            ("n4", "n7", "601", 600),
        ],
        [
            ("m1", "n1", "AN", "a", 150),
            ("m2", "n2", "ABC", "b", 450),
            ("m3", "n3", "BN", "a", 200),
            ("m4", "n3", "CA", "a", 250),
            ("m5", "n4", "CN", "a", 220),
            ("m6", "n5", "AB", "a", 260),
            ("m7", "n6", "BC", "a", 240),
            ("m8", "n7", "ABC", "a", 380),
            ("m9", "n7", "AN", "a", 180),
        ],
        4.16, 5000.0, 2200.0,
    )


def ieee13_like():
    """7 nodes and 6 three-phase segments, 10 loads, 3 MW nominal peak."""
    return _build(
        "ieee13_like",
        ["650", "632", "633", "671", "680", "692", "675"],
        [
            ("650", "632", "601", 2000),
            ("632", "633", "602", 500),
            ("632", "671", "601", 2000),
            ("671", "680", "601", 1000),
            ("671", "692", "602", 300),
            ("692", "675", "602", 500),
        ],
        [
            ("m633", "633", "ABC", "a", 480),
            ("m645", "632", "BN", "a", 290),
            ("m646", "632", "BC", "a", 230),
            ("m671", "671", "ABC", "b", 1155),
            ("m675a", "675", "AN", "a", 485),
            ("m675b", "675", "BN", "a", 200),
            ("m675c", "675", "CN", "a", 290),
            ("m692", "692", "CA", "a", 170),
            ("m652", "680", "AN", "a", 128),
            ("m611", "680", "CN", "a", 170),
        ],
        4.16, 5000.0, 3000.0,
    )


def ieee37_like():
    """22 nodes and 21 three-phase segments, 25 loads, 2.4 MW nominal peak."""
    segments = [
        ("799", "701", "721", 1850),
        ("701", "702", "722", 960),
        ("702", "705", "724", 400),
        ("705", "742", "724", 320),
        ("705", "712", "724", 240),
        ("702", "713", "723", 360),
        ("713", "704", "723", 520),
        ("704", "714", "724", 200),
        ("704", "720", "723", 800),
        ("702", "703", "722", 1320),
        ("703", "727", "724", 240),
        ("727", "744", "723", 280),
        ("744", "728", "724", 200),
        ("703", "730", "723", 600),
        ("730", "709", "723", 200),
        ("709", "708", "723", 320),
        ("708", "733", "723", 320),
        ("733", "734", "723", 560),
        ("734", "737", "724", 640),
        ("734", "710", "724", 520),
        ("708", "732", "724", 320),
    ]
    nodes = ["799"]
    for a, b, *_ in segments:
        for n in (a, b):
            if n not in nodes:
                nodes.append(n)
    loads = [
        ("m701", "701", "ABC", "a", 210),
        ("m712", "712", "CA", "a", 85),
        ("m713", "713", "CA", "a", 85),
        ("m714a", "714", "AB", "a", 17),
        ("m714b", "714", "BC", "a", 21),
        ("m720", "720", "CA", "a", 85),
        ("m742a", "742", "AN", "a", 8),
        ("m742b", "742", "BN", "a", 85),
        ("m705a", "705", "AB", "a", 42),
        ("m705c", "705", "CN", "a", 42),
        ("m704", "704", "ABC", "b", 90),
        ("m727", "727", "CA", "a", 42),
        ("m728", "728", "ABC", "c", 126),
        ("m744", "744", "AN", "a", 42),
        ("m730", "730", "CN", "a", 85),
        ("m709a", "709", "AN", "a", 60),
        ("m709b", "709", "BN", "a", 60),
        ("m703", "703", "BC", "a", 85),
        ("m732", "732", "CA", "a", 42),
        ("m733", "733", "AB", "a", 85),
        ("m734", "734", "CN", "a", 42),
        ("m737", "737", "AN", "a", 140),
        ("m710", "710", "BN", "a", 85),
        ("m708", "708", "BN", "a", 85),
        ("m702", "702", "ABC", "a", 60),
    ]
    return _build("ieee37_like", nodes, segments, loads, 4.8, 2500.0, 2400.0)


FEEDERS = {
    "two_node": two_node,
    "four_node": four_node,
    "eight_node": eight_node,
    "ieee13_like": ieee13_like,
    "ieee37_like": ieee37_like,
}


def load_feeder(name):
    """``(model, nominal_peak_kw)`` for a bundled feeder."""
    try:
        return FEEDERS[name]()
    except KeyError:
        raise KeyError(f"unknown corpus feeder {name!r}; choose from {sorted(FEEDERS)}") from None
