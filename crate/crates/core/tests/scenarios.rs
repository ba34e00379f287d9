use nemo_sim::config::{FaultConfig, ScenarioConfig};
use nemo_sim::experiment::run;
use nemo_sim::proto::{DropReason, Milestone, Mode, Protocol};
use nemo_sim::sim::SimTime;
use nemo_sim::world::{RunOutput, CBR_FLOW, UPSTREAM_FLOW};

const ALL: [Protocol; 3] = [Protocol::NemoBs, Protocol::DiffNemo, Protocol::DiffFhNemo];

fn scenario(p: Protocol, speed: f64, congested: bool) -> ScenarioConfig {
    let mut c = if congested {
        ScenarioConfig::congested()
    } else {
        ScenarioConfig::default()
    };
    c.protocol = p;
    c.dmr_speed_kmh = speed;
    c
}

fn flow_conserved(out: &RunOutput, flow: u32) -> bool {
    let recs: Vec<_> = out.flow(flow).collect();
    let delivered = recs.iter().filter(|r| r.delivered_at.is_some()).count() as u64;
    let dropped = recs.iter().filter(|r| r.dropped.is_some()).count() as u64;
    recs.len() as u64 == delivered + dropped + out.in_flight[flow as usize]
}

#[test]
fn every_packet_is_accounted_for() {
    for p in ALL {
        for congested in [false, true] {
            for speed in [15.0, 90.0] {
                let mut c = scenario(p, speed, congested);
                c.upstream_cbr = true;
                let (out, rep) = run(&c, false);
                assert!(rep.conserved(), "{p:?} {speed} {congested}: {rep:?}");
                assert!(flow_conserved(&out, UPSTREAM_FLOW), "{p:?} upstream");
                assert_eq!(rep.duplicates, 0);
                assert_eq!(out.opaque_deliveries, 0, "MNN saw a tunnel header");
                assert_eq!(rep.sent, c.cbr.packet_count());
            }
        }
    }
}

#[test]
fn deliveries_reach_the_mnn_unencapsulated() {
    for p in ALL {
        let (out, _) = run(&scenario(p, 60.0, false), false);
        for r in out.flow(CBR_FLOW).filter(|r| r.delivered_at.is_some()) {
            let last = r.hops.last().expect("hops");
            assert_eq!(last.node, out.topo.mnn);
            assert_eq!(last.size, 1000);
        }
    }
}

#[test]
fn diff_nemo_drops_the_tunnel_once_the_cn_is_bound() {
    let (out, _) = run(&scenario(Protocol::DiffNemo, 60.0, false), false);
    let t0 = out.cn_bindings[0];
    let dmr = out.topo.dmr;
    let mut seen = (0, 0);
    for r in out.flow(CBR_FLOW).filter(|r| r.delivered_at.is_some()) {
        let air = r.hops.iter().find(|h| h.node == dmr).expect("through the DMR");
        if r.created_at < t0 {
            assert!(air.size >= 1040, "seq {} arrived bare before binding", r.seq);
            seen.0 += 1;
        } else {
            assert_eq!(air.size, 1000, "seq {} still tunnelled", r.seq);
            seen.1 += 1;
        }
    }
    assert!(seen.0 > 0 && seen.1 > 100);
}

#[test]
fn upstream_flow_reaches_the_cn() {
    for p in ALL {
        let mut c = scenario(p, 60.0, false);
        c.upstream_cbr = true;
        let (out, _) = run(&c, false);
        let delivered: Vec<_> = out.flow(UPSTREAM_FLOW).filter(|r| r.delivered_at.is_some()).collect();
        assert!(delivered.len() > 100, "{p:?}: {}", delivered.len());
        for r in delivered {
            assert_eq!(r.hops.last().unwrap().node, out.topo.cn);
            assert_eq!(r.hops.first().unwrap().node, out.topo.dmr);
        }
    }
}

#[test]
fn baseline_routes_everything_through_the_ha() {
    let (out, _) = run(&scenario(Protocol::NemoBs, 60.0, false), false);
    for r in out.flow(CBR_FLOW).filter(|r| r.delivered_at.is_some()) {
        assert!(r.path().contains(&out.topo.ha));
    }
    assert!(out.cn_bindings.is_empty());
}

#[test]
fn lost_fast_signals_still_complete() {
    let mut c = scenario(Protocol::DiffFhNemo, 60.0, false);
    c.faults = vec![
        FaultConfig {
            signal: "FBack".into(),
            nth: 1,
        },
        FaultConfig {
            signal: "HI".into(),
            nth: 2,
        },
    ];
    c.validate().unwrap();
    let (out, rep) = run(&c, false);
    assert!(out.signal_drops.get(&DropReason::Injected).copied().unwrap_or(0) >= 2);
    assert!(rep.conserved());
    let (clean, clean_rep) = run(&scenario(Protocol::DiffFhNemo, 60.0, false), false);
    assert_eq!(rep.handovers.len(), clean_rep.handovers.len());
    let done = |o: &RunOutput| o.milestones.iter().filter(|m| m.1 == o.topo.dmr && m.2 == Milestone::Complete).count();
    assert_eq!(done(&out), done(&clean));
    assert!(rep.delivered + 20 >= clean_rep.delivered, "{} vs {}", rep.delivered, clean_rep.delivered);
}

/// Data packets lost while the link was switching for a micro handover.
fn micro_window_losses(out: &RunOutput) -> usize {
    out.l2
        .iter()
        .filter(|l| l.micro == Some(true))
        .map(|l| {
            let lo = l.down_at.saturating_sub(SimTime::from_secs(1));
            let hi = l.up_at.unwrap() + SimTime::from_secs(1);
            out.flow(CBR_FLOW)
                .filter(|r| r.created_at >= lo && r.created_at <= hi && r.dropped.is_some())
                .count()
        })
        .sum()
}

#[test]
fn reactive_handover_loses_what_prediction_buffers() {
    let mut c = scenario(Protocol::DiffFhNemo, 60.0, false);
    let (pred_out, _) = run(&c, false);
    c.mode = Mode::Reactive;
    let (reac_out, reac) = run(&c, false);
    assert!(reac.conserved());
    assert_eq!(micro_window_losses(&pred_out), 0);
    assert!(micro_window_losses(&reac_out) > 0);
    let done = |o: &RunOutput| o.milestones.iter().filter(|m| m.1 == o.topo.dmr && m.2 == Milestone::Complete).count();
    assert_eq!(done(&reac_out), done(&pred_out));
}

#[test]
fn background_load_hurts_the_baseline() {
    let (_, calm) = run(&scenario(Protocol::NemoBs, 60.0, false), false);
    let (out, busy) = run(&scenario(Protocol::NemoBs, 60.0, true), false);
    assert!(busy.loss_pct > calm.loss_pct);
    assert!(out.background.sent > 0 && out.background.dropped > 0);
    assert!(busy.queue_drops[5] > 0, "best-effort RED should drop");
}

#[test]
fn loss_grows_with_speed() {
    for p in ALL {
        let (_, slow) = run(&scenario(p, 15.0, true), false);
        let (_, fast) = run(&scenario(p, 90.0, true), false);
        assert!(fast.loss_pct > slow.loss_pct, "{p:?}");
    }
}
