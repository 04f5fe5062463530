//! Small hand-built networks used by tests, examples and the CLI smoke runs.
//!
//! Bus ids and branch ids start at 1; every line has susceptance 10 unless
//! noted otherwise.

use crate::case_model::{Branch, Bus, BusKind, Generator, GridCase};

fn slack(id: usize) -> Bus {
    Bus {
        id,
        kind: BusKind::Slack,
        pd: 0.0,
        qd: 0.0,
        vspec: Some(1.0),
    }
}

fn load(id: usize, pd: f64, qd: f64) -> Bus {
    Bus {
        id,
        kind: BusKind::Load,
        pd,
        qd,
        vspec: None,
    }
}

fn line(id: usize, from_bus: usize, to_bus: usize, b: f64, rate_a: f64) -> Branch {
    Branch {
        id,
        from_bus,
        to_bus,
        b,
        rate_a,
    }
}

fn case(buses: Vec<Bus>, branches: Vec<Branch>, generators: Vec<Generator>) -> GridCase {
    GridCase {
        base_mva: 100.0,
        buses,
        branches,
        generators,
        slack_angle: 0.0,
    }
}

/// Slack, one generator and one load on a triangle.
pub fn slack_gen_load() -> GridCase {
    case(
        vec![
            slack(1),
            Bus {
                id: 2,
                kind: BusKind::Generator,
                pd: 0.0,
                qd: 0.0,
                vspec: Some(1.0),
            },
            load(3, 0.9, 0.2),
        ],
        vec![line(1, 1, 2, 10.0, 0.5), line(2, 1, 3, 10.0, 0.5), line(3, 2, 3, 10.0, 0.5)],
        vec![Generator { bus: 1, pg: 0.4 }, Generator { bus: 2, pg: 0.5 }],
    )
}

/// Slack feeding two unequal loads on a triangle. Line 3 joins the loads.
pub fn slack_load_load() -> GridCase {
    case(
        vec![slack(1), load(2, 0.8, 0.1), load(3, 0.3, 0.05)],
        vec![line(1, 1, 2, 10.0, 0.5), line(2, 1, 3, 10.0, 0.5), line(3, 2, 3, 10.0, 0.1)],
        vec![Generator { bus: 1, pg: 1.1 }],
    )
}

/// Two parallel load-load lines A (id 3, b = 5) and B (id 4, b = 10). Since
/// `Theta_B = 4 Theta_A` identically, B's limit below four times A's nests A.
pub fn nested_parallel() -> GridCase {
    case(
        vec![slack(1), load(2, 0.8, 0.1), load(3, 0.3, 0.05)],
        vec![
            line(1, 1, 2, 10.0, 1.0),
            line(2, 1, 3, 10.0, 1.0),
            line(3, 2, 3, 5.0, 0.05),
            line(4, 2, 3, 10.0, 0.15),
        ],
        vec![Generator { bus: 1, pg: 1.1 }],
    )
}

/// Ring of four lines: slack 1 and loads 2, 3, 4.
pub fn four_line_ring() -> GridCase {
    case(
        vec![slack(1), load(2, 0.3, 0.05), load(3, 0.4, 0.05), load(4, 0.2, 0.05)],
        vec![
            line(1, 1, 2, 10.0, 0.3),
            line(2, 2, 3, 10.0, 0.3),
            line(3, 3, 4, 10.0, 0.3),
            line(4, 4, 1, 10.0, 0.3),
        ],
        vec![Generator { bus: 1, pg: 0.9 }],
    )
}

/// Slack and a single load joined by one line.
pub fn single_line() -> GridCase {
    case(
        vec![slack(1), load(2, 0.5, 0.1)],
        vec![line(1, 1, 2, 10.0, 0.5)],
        vec![Generator { bus: 1, pg: 0.5 }],
    )
}

/// Slack hub with three identical radial loads.
pub fn symmetric_star() -> GridCase {
    case(
        vec![slack(1), load(2, 0.4, 0.1), load(3, 0.4, 0.1), load(4, 0.4, 0.1)],
        vec![line(1, 1, 2, 10.0, 0.4), line(2, 1, 3, 10.0, 0.4), line(3, 1, 4, 10.0, 0.4)],
        vec![Generator { bus: 1, pg: 1.2 }],
    )
}

/// Bus 3, fed radially by a weak line, demands far more than it can deliver.
pub fn overloaded_bus() -> GridCase {
    case(
        vec![slack(1), load(2, 0.5, 0.1), load(3, 20.0, 2.0)],
        vec![line(1, 1, 2, 10.0, 1.0), line(2, 1, 3, 2.0, 1.0)],
        vec![Generator { bus: 1, pg: 20.5 }],
    )
}
