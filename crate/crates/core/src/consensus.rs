//! Soft consensus on the stacked estimates and hard consensus on the
//! information contributions of neighbouring satellites.

use std::collections::BTreeMap;

use crate::algebra::{quat_scale_error, Quaternion, UnitDualQuaternion, UnitQuaternion, Vec3, Vec6};
use crate::ddq::{
    assemble_measurement_for, measurement_update, InfoQuantities, LocalFilterState, MeasurementNoise, MeasurementSet,
    PredictedView,
};
use crate::error::{Error, Result};
use crate::graph::{Neighbourhood, NodeId};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsensusWeights {
    pub attitude: f64,
    pub position: f64,
    pub bias: f64,
}

impl ConsensusWeights {
    pub fn new(attitude: f64, position: f64, bias: f64) -> Result<Self> {
        for (w, what) in [(attitude, "attitude"), (position, "position"), (bias, "bias")] {
            if !(w.is_finite() && (0.0..=1.0).contains(&w)) {
                return Err(Error::InvalidArgument(format!("{what} consensus weight {w} outside [0, 1]")));
            }
        }
        Ok(ConsensusWeights { attitude, position, bias })
    }

    /// `1 / |V_i|` on every quantity.
    pub fn uniform(layout: &Neighbourhood) -> Self {
        let mu = 1.0 / layout.len() as f64;
        ConsensusWeights { attitude: mu, position: mu, bias: mu }
    }

    pub fn zero() -> Self {
        ConsensusWeights { attitude: 0.0, position: 0.0, bias: 0.0 }
    }
}

/// Estimates a node shares with one neighbour: the nodes both track.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusSnapshot {
    pub sender: NodeId,
    pub poses: BTreeMap<NodeId, UnitDualQuaternion>,
    pub biases: BTreeMap<NodeId, Vec6>,
}

impl ConsensusSnapshot {
    pub fn new(state: &LocalFilterState, receiver: &Neighbourhood) -> Self {
        let mut poses = BTreeMap::new();
        let mut biases = BTreeMap::new();
        for (s, &n) in state.layout().members().iter().enumerate() {
            if receiver.contains(n) {
                poses.insert(n, state.poses[s]);
                biases.insert(n, state.biases[s]);
            }
        }
        ConsensusSnapshot { sender: state.owner(), poses, biases }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftOutcome {
    pub state: LocalFilterState,
    /// Tracked nodes whose attitude weight had to be reduced to stay in the
    /// unit ball.
    pub clamped: usize,
}

/// One soft-consensus step towards the neighbours' estimates.
pub fn soft_consensus_step(
    state: &LocalFilterState,
    inbox: &BTreeMap<NodeId, ConsensusSnapshot>,
    weights: &ConsensusWeights,
) -> Result<SoftOutcome> {
    let owner = state.owner();
    for j in state.layout().neighbours() {
        if !inbox.contains_key(&j) {
            return Err(Error::MissingMessage { from: j, to: owner });
        }
    }
    let mut next = state.clone();
    let mut clamped = 0;
    for (s, &n) in state.layout().members().iter().enumerate() {
        let (q_own, r_own) = state.poses[s].to_parts();
        let mut dr = Vec3::zeros();
        let mut db = Vec6::zeros();
        let mut theta = Quaternion::identity();
        let mut any = false;
        for j in state.layout().neighbours() {
            let snap = &inbox[&j];
            let (Some(pj), Some(bj)) = (snap.poses.get(&n), snap.biases.get(&n)) else {
                continue;
            };
            any = true;
            let (qj, rj) = pj.to_parts();
            dr += rj - r_own;
            db += bj - state.biases[s];
            let step = (q_own.conj() * qj).into_inner().canonical();
            theta = theta * step;
        }
        if !any {
            continue;
        }
        let theta = UnitQuaternion::new_normalize(theta.canonical())?;
        let vn = theta.vector().norm();
        let mut mu_q = weights.attitude;
        if mu_q * vn > 1.0 {
            mu_q = 1.0 / vn;
            clamped += 1;
        }
        if mu_q != 0.0 || weights.position != 0.0 {
            let phi_q = quat_scale_error(&theta, mu_q)?;
            let q_new = (q_own * phi_q).renormalize();
            let r_new = r_own + dr * weights.position;
            next.poses[s] = UnitDualQuaternion::from_parts(&q_new, &r_new);
        }
        next.biases[s] += db * weights.bias;
    }
    Ok(SoftOutcome { state: next, clamped })
}

/// Information prepared by `sender` for `receiver`, in the receiver's layout.
#[derive(Clone, Debug, PartialEq)]
pub struct HardPacket {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub info: InfoQuantities,
}

/// Reshape the sender's measurements into the receiver's state, linearised
/// about the receiver's predicted estimates.
pub fn hard_prepare(
    sender: &Neighbourhood,
    meas: &MeasurementSet,
    noise: &MeasurementNoise,
    receiver: &PredictedView,
) -> Result<HardPacket> {
    let sm = assemble_measurement_for(sender, meas, noise, receiver)?;
    Ok(HardPacket { sender: sender.owner(), receiver: receiver.layout.owner(), info: sm.info_quantities()? })
}

/// Sum the packets from the whole neighbourhood (own included) and apply the
/// resulting measurement update. A stubborn node only uses its own packet.
pub fn hard_aggregate_update(
    state: &LocalFilterState,
    packets: &BTreeMap<NodeId, HardPacket>,
    stubborn: bool,
) -> Result<LocalFilterState> {
    let owner = state.owner();
    let mut total = InfoQuantities::zeros(state.layout().len());
    for &j in state.layout().members() {
        let p = packets.get(&j).ok_or(Error::MissingMessage { from: j, to: owner })?;
        if p.receiver != owner || p.sender != j {
            return Err(Error::InvalidArgument(format!(
                "packet {} -> {} delivered to node {owner}",
                p.sender, p.receiver
            )));
        }
        if stubborn && j != owner {
            continue;
        }
        total.accumulate(&p.info)?;
    }
    measurement_update(state, &total.u, &total.u_reduced)
}
