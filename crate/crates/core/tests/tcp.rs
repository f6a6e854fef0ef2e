// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use bftorder::consensus::ClusterConfig;
use bftorder::frontend::FrontendActor;
use bftorder::node::OrderingNode;
use bftorder::scenario::{build_actors, envelope_script, Scenario, ScenarioSpec};
use bftorder::transport::tcp::{spawn_on, write_frame, TcpHandle, TcpOptions};
use bftorder::transport::{frontend_endpoint, Actor, EndpointId};

struct Cluster {
    nodes: Vec<Option<TcpHandle>>,
    frontend: TcpHandle,
}

fn listeners(eps: &[EndpointId]) -> (BTreeMap<EndpointId, SocketAddr>, Vec<TcpListener>) {
    let mut addrs = BTreeMap::new();
    let mut ls = Vec::new();
    for ep in eps {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        addrs.insert(*ep, l.local_addr().unwrap());
        ls.push(l);
    }
    (addrs, ls)
}

fn start(spec: &ScenarioSpec) -> Cluster {
    let actors = build_actors(spec);
    let mut eps: Vec<EndpointId> = (0..spec.cluster.n as EndpointId).collect();
    eps.push(frontend_endpoint(0));
    let (addrs, mut ls) = listeners(&eps);
    let fl = ls.pop().unwrap();
    let mut nodes = Vec::new();
    for (node, l) in actors.nodes.into_iter().zip(ls) {
        let opts = TcpOptions::new(l.local_addr().unwrap(), addrs.clone());
        nodes.push(Some(spawn_on(l, Box::new(node) as Box<dyn Actor>, opts).unwrap()));
    }
    let fe = actors.frontends.into_iter().next().unwrap();
    let opts = TcpOptions::new(fl.local_addr().unwrap(), addrs);
    let frontend = spawn_on(fl, Box::new(fe), opts).unwrap();
    Cluster { nodes, frontend }
}

fn wait_for(limit: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let until = Instant::now() + limit;
    while Instant::now() < until {
        if cond() {
            return true;
        }
        thread::sleep(Duration::from_millis(20));
    }
    cond()
}

fn delivered(c: &Cluster) -> usize {
    c.frontend
        .with_actor::<FrontendActor, _>(|f| f.delivery_counts().len())
        .unwrap()
}

fn spec(count: u64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::new(ClusterConfig::classic(4, 1).unwrap(), 1, 21);
    spec.flush_timeout = Duration::from_millis(100);
    spec.scripts
        .push((0, envelope_script("ch0", 5, count, Duration::ZERO, Duration::ZERO, 40)));
    spec
}

#[test]
fn loopback_cluster_delivers_blocks() {
    let c = start(&spec(50));
    assert!(
        wait_for(Duration::from_secs(20), || delivered(&c) == 50),
        "delivered {}",
        delivered(&c)
    );
    let blocks = c
        .frontend
        .with_actor::<FrontendActor, _>(|f| f.blocks("ch0").to_vec())
        .unwrap();
    assert_eq!(blocks.len(), 5);
    assert!(blocks.iter().all(|b| b.envelopes.len() == 10));
    assert!(c
        .frontend
        .with_actor::<FrontendActor, _>(|f| f.delivery_counts().values().all(|n| *n == 1))
        .unwrap());
}

#[test]
fn loopback_chain_equals_simulated_chain() {
    let spec = spec(50);
    let mut sc = Scenario::build(spec.clone());
    let r = sc.run_until_delivered(50, Duration::from_secs(30));
    assert!(r.is_complete());
    let simulated: Vec<Vec<u8>> = sc.node(1).record().emitted["ch0"].clone();

    let c = start(&spec);
    let ok = wait_for(Duration::from_secs(20), || {
        c.nodes[1]
            .as_ref()
            .unwrap()
            .with_actor::<OrderingNode, _>(|n| n.record().emitted.get("ch0").map_or(0, Vec::len))
            .unwrap()
            >= simulated.len()
    });
    assert!(ok);
    let real = c.nodes[1]
        .as_ref()
        .unwrap()
        .with_actor::<OrderingNode, _>(|n| n.record().emitted["ch0"].clone())
        .unwrap();
    assert_eq!(real, simulated);
}

#[test]
fn killing_one_node_leaves_delivery_intact() {
    let mut spec = spec(0);
    spec.scripts = vec![(
        0,
        envelope_script("ch0", 5, 60, Duration::ZERO, Duration::from_millis(5), 40),
    )];
    let mut c = start(&spec);
    assert!(wait_for(Duration::from_secs(20), || delivered(&c) >= 10));
    c.nodes[3].take().unwrap().stop();
    assert!(
        wait_for(Duration::from_secs(20), || delivered(&c) == 60),
        "delivered {}",
        delivered(&c)
    );
}

#[test]
fn killing_the_leader_triggers_a_regency_change() {
    let mut spec = spec(0);
    spec.scripts = vec![(
        0,
        envelope_script("ch0", 5, 40, Duration::ZERO, Duration::from_millis(20), 40),
    )];
    let mut c = start(&spec);
    assert!(wait_for(Duration::from_secs(20), || delivered(&c) >= 10));
    c.nodes[0].take().unwrap().stop();
    assert!(
        wait_for(Duration::from_secs(30), || delivered(&c) == 40),
        "delivered {}",
        delivered(&c)
    );
    let regency = c.nodes[1]
        .as_ref()
        .unwrap()
        .with_actor::<OrderingNode, _>(|n| n.replica().regency())
        .unwrap();
    assert!(regency >= 1);
}

#[test]
fn malformed_frame_quarantines_the_peer() {
    let c = start(&spec(0));
    let target = c.nodes[2].as_ref().unwrap().local_addr();
    let mut s = TcpStream::connect(target).unwrap();
    let hello = bftorder::consensus::ProtocolMessage::new(0, 0, 3, bftorder::consensus::Body::Hello).encode();
    write_frame(&mut s, &hello).unwrap();
    s.write_all(&u32::MAX.to_be_bytes()).unwrap();
    s.flush().unwrap();
    let node2 = c.nodes[2].as_ref().unwrap();
    assert!(wait_for(Duration::from_secs(5), || node2.quarantined().contains(&3)));
    let mut again = TcpStream::connect(target).unwrap();
    write_frame(&mut again, &hello).unwrap();
    assert!(wait_for(Duration::from_secs(5), || node2
        .stats()
        .rejected
        .load(std::sync::atomic::Ordering::Relaxed)
        >= 1));
}
