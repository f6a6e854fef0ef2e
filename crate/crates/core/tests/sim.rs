// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;
use std::time::Duration;

use bftorder::consensus::ClusterConfig;
use bftorder::frontend::{FrontendMode, LoadSpec};
use bftorder::scenario::{envelope_script, Scenario, ScenarioSpec};
use bftorder::transport::faults::{Behavior, Directive, FaultScript};
use bftorder::transport::latency::LatencyMatrix;
use bftorder::transport::sim::SimStatus;
use bftorder::transport::CostModel;
use bftorder::types::Block;

fn lan_spec(cluster: ClusterConfig, seed: u64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::new(cluster, 2, seed);
    spec.sim.latency = LatencyMatrix::uniform(0.2, 0.05);
    spec.sim.costs = CostModel::lan();
    spec.flush_timeout = Duration::from_millis(50);
    spec
}

fn with_load(mut spec: ScenarioSpec, per_client: u64) -> ScenarioSpec {
    for k in 0..spec.frontends {
        let mut load = LoadSpec::closed(4, 2, 64);
        load.per_client = Some(per_client);
        spec.loads.push((k, load));
    }
    spec
}

#[test]
fn healthy_cluster_delivers_every_envelope_once() {
    let spec = with_load(lan_spec(ClusterConfig::classic(4, 1).unwrap(), 1), 25);
    let mut sc = Scenario::build(spec);
    let r = sc.run_until_delivered(2 * 4 * 25, Duration::from_secs(30));
    assert_eq!(r.status, SimStatus::Complete, "{r:?}");
    let all: BTreeSet<_> = (0..4).collect();
    let summary = sc.check_agreement(&all).unwrap();
    assert!(summary.blocks >= 20, "{summary:?}");
    for k in 0..2 {
        let fe = sc.frontend(k);
        assert!(fe.delivery_counts().values().all(|c| *c == 1));
        assert_eq!(fe.unresolved(), 0);
    }
}

#[test]
fn runs_are_reproducible_from_the_seed() {
    let run = |seed| {
        let spec = with_load(lan_spec(ClusterConfig::classic(4, 1).unwrap(), seed), 10);
        let mut sc = Scenario::build(spec);
        let r = sc.run_until_delivered(80, Duration::from_secs(30));
        assert!(r.is_complete());
        (r.trace_hash, r.virtual_time)
    };
    assert_eq!(run(7), run(7));
    assert_ne!(run(7).0, run(8).0);
}

#[test]
fn wheat_cluster_agrees() {
    let spec = with_load(lan_spec(ClusterConfig::wheat_default(1, 1).unwrap(), 3), 20);
    let mut sc = Scenario::build(spec);
    let r = sc.run_until_delivered(2 * 4 * 20, Duration::from_secs(30));
    assert!(r.is_complete(), "{r:?}");
    sc.check_agreement(&(0..5).collect()).unwrap();
}

#[test]
fn partial_block_is_flushed_after_the_timeout() {
    let mut spec = lan_spec(ClusterConfig::classic(4, 1).unwrap(), 5);
    spec.flush_timeout = Duration::from_millis(200);
    spec.scripts.push((
        0,
        envelope_script("ch0", 9, 3, Duration::ZERO, Duration::from_millis(1), 32),
    ));
    let mut sc = Scenario::build(spec);
    let r = sc.run_until_delivered(0, Duration::from_secs(5));
    assert!(r.is_complete());
    let r = sc.sim.run_until(Duration::from_secs(5), |s| {
        s.frontends().all(|f| f.delivery_counts().len() == 3)
    });
    assert!(r.is_complete(), "{r:?}");
    assert!(r.virtual_time >= Duration::from_millis(200));
    let fe = sc.frontend(1);
    assert_eq!(fe.blocks("ch0").len(), 1);
    assert_eq!(fe.blocks("ch0")[0].envelopes.len(), 3);
    sc.check_agreement(&(0..4).collect()).unwrap();
}

#[test]
fn altered_blocks_do_not_reach_clients() {
    for mode in [FrontendMode::Match2f1, FrontendMode::VerifyF1] {
        let mut spec = with_load(lan_spec(ClusterConfig::classic(4, 1).unwrap(), 11), 15);
        spec.frontend_mode = mode;
        spec.sim.faults.push(Directive::Byzantine {
            node: 2,
            behavior: Behavior::AlterBlock,
        });
        let mut sc = Scenario::build(spec);
        let r = sc.run_until_delivered(2 * 4 * 15, Duration::from_secs(30));
        assert!(r.is_complete(), "{mode:?}: {r:?}");
        sc.check_agreement(&[0, 1, 3].into_iter().collect()).unwrap();
        let fe = sc.frontend(0);
        let reference = sc.node(0);
        let honest = &reference.record().emitted["ch0"];
        let blocks = fe.blocks("ch0");
        for (i, b) in blocks.iter().enumerate() {
            let reference = Block::from_bytes(&honest[i]).unwrap();
            assert_eq!(b.header, reference.header);
            assert_eq!(b.envelopes, reference.envelopes);
        }
    }
}

#[test]
fn equivocating_leader_is_replaced() {
    let mut spec = with_load(lan_spec(ClusterConfig::classic(4, 1).unwrap(), 13), 10);
    spec.sim.faults.push(Directive::Byzantine {
        node: 0,
        behavior: Behavior::EquivocatePropose,
    });
    let mut sc = Scenario::build(spec);
    let r = sc.run_until_delivered(80, Duration::from_secs(60));
    assert!(r.is_complete(), "{r:?}");
    sc.check_agreement(&[1, 2, 3].into_iter().collect()).unwrap();
    assert!(sc.node(1).replica().regency() >= 1);
}

#[test]
fn crash_of_f_nodes_keeps_liveness() {
    let mut spec = with_load(lan_spec(ClusterConfig::classic(4, 1).unwrap(), 17), 20);
    let mut faults = FaultScript::none();
    faults.push(Directive::Crash {
        node: 0,
        at: Duration::from_millis(30),
    });
    spec.sim.faults = faults;
    let mut sc = Scenario::build(spec);
    let r = sc.run_until_delivered(160, Duration::from_secs(60));
    assert!(r.is_complete(), "{r:?}");
    sc.check_agreement(&[1, 2, 3].into_iter().collect()).unwrap();
}

#[test]
fn all_nodes_crashed_drains_the_queue() {
    let mut spec = with_load(lan_spec(ClusterConfig::classic(4, 1).unwrap(), 19), 5);
    for n in 0..4 {
        spec.sim.faults.push(Directive::Crash {
            node: n,
            at: Duration::ZERO,
        });
    }
    let mut sc = Scenario::build(spec);
    let r = sc.run_until_delivered(40, Duration::from_secs(600));
    assert_eq!(r.status, SimStatus::Incomplete);
}
