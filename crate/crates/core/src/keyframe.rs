//! Keyframe insertion from tracked-inlier counts.
//!
//! A frame becomes a keyframe when `inliers_cur < (inliers_ref + delta) * ratio`,
//! where `delta` is a PID correction driven by `inliers_ref - inliers_cur`, or
//! when a Kalman-filtered speed estimate exceeds a gate.

use nalgebra::Vector3;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KeyframeError {
    #[error("timestamp {next} does not follow {prev}")]
    NonIncreasingTimestamp { prev: f64, next: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidState {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral: f64,
    /// `None` until the first update, so the first derivative term is zero.
    pub prev_error: Option<f64>,
    pub integral_clamp: f64,
}

impl PidState {
    pub fn new(kp: f64, ki: f64, kd: f64, integral_clamp: f64) -> Self {
        Self {
            kp,
            ki,
            kd,
            integral: 0.0,
            prev_error: None,
            integral_clamp,
        }
    }

    pub fn zero_gains() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }
}

impl Default for PidState {
    fn default() -> Self {
        Self::new(0.3, 0.05, 0.1, 50.0)
    }
}

/// Discrete PID step. `error` is `inliers_ref - inliers_cur`.
pub fn pid_update(state: &PidState, error: f64, dt: f64) -> (PidState, f64) {
    let mut next = *state;
    next.integral = (state.integral + error * dt).clamp(-state.integral_clamp, state.integral_clamp);
    let derivative = state.prev_error.map_or(0.0, |p| (error - p) / dt);
    next.prev_error = Some(error);
    let delta = state.kp * error + state.ki * next.integral + state.kd * derivative;
    (next, delta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityKalman {
    pub v: f64,
    pub p: f64,
    pub q: f64,
    pub r_meas: f64,
}

impl Default for VelocityKalman {
    fn default() -> Self {
        Self {
            v: 0.0,
            p: 1.0,
            q: 1e-3,
            r_meas: 1e-2,
        }
    }
}

/// Scalar Kalman step on the speed measured between two positions.
pub fn kalman_velocity(
    state: &VelocityKalman,
    pos_prev: &Vector3<f64>,
    pos_cur: &Vector3<f64>,
    dt: f64,
) -> (VelocityKalman, f64) {
    let z = (pos_cur - pos_prev).norm() / dt;
    kalman_update(state, z)
}

pub fn kalman_update(state: &VelocityKalman, z: f64) -> (VelocityKalman, f64) {
    let mut s = *state;
    s.p += s.q;
    let k = s.p / (s.p + s.r_meas);
    s.v += k * (z - s.v);
    s.p *= 1.0 - k;
    (s, s.v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameStats {
    pub inliers_cur: usize,
    pub inliers_ref: usize,
    pub position: Vector3<f64>,
    pub timestamp: f64,
}

pub fn should_insert(stats: &FrameStats, delta_pid: f64, ratio: f64) -> bool {
    (stats.inliers_cur as f64) < (stats.inliers_ref as f64 + delta_pid) * ratio
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionReason {
    InlierRule,
    VelocityRule,
    None,
}

impl DecisionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DecisionReason::InlierRule => "inlier_rule",
            DecisionReason::VelocityRule => "velocity_rule",
            DecisionReason::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyframeDecision {
    pub insert: bool,
    pub reason: DecisionReason,
}

/// Combines the inlier rule and the velocity gate; `v_gate = None` disables
/// the gate.
pub fn decide(stats: &FrameStats, delta_pid: f64, v_hat: f64, ratio: f64, v_gate: Option<f64>) -> KeyframeDecision {
    let reason = if should_insert(stats, delta_pid, ratio) {
        DecisionReason::InlierRule
    } else if v_gate.is_some_and(|g| v_hat > g) {
        DecisionReason::VelocityRule
    } else {
        DecisionReason::None
    };
    KeyframeDecision {
        insert: reason != DecisionReason::None,
        reason,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyParams {
    pub pid: PidState,
    pub kalman: VelocityKalman,
    pub ratio: f64,
    pub v_gate: Option<f64>,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            pid: PidState::default(),
            kalman: VelocityKalman::default(),
            ratio: 0.75,
            v_gate: Some(7.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionRecord {
    pub stats: FrameStats,
    pub delta_pid: f64,
    pub v_hat: f64,
    pub decision: KeyframeDecision,
}

/// Stateful policy for one tracking session.
#[derive(Debug, Clone)]
pub struct KeyframePolicy {
    params: PolicyParams,
    pid: PidState,
    kalman: VelocityKalman,
    ref_position: Vector3<f64>,
    ref_timestamp: f64,
    ref_inliers: usize,
    last_timestamp: f64,
    log: Vec<DecisionRecord>,
}

impl KeyframePolicy {
    /// Starts a session whose first keyframe has `inliers` tracked features.
    pub fn new(params: PolicyParams, inliers: usize, position: Vector3<f64>, timestamp: f64) -> Self {
        Self {
            params,
            pid: params.pid,
            kalman: params.kalman,
            ref_position: position,
            ref_timestamp: timestamp,
            ref_inliers: inliers,
            last_timestamp: timestamp,
            log: Vec::new(),
        }
    }

    pub fn reference_inliers(&self) -> usize {
        self.ref_inliers
    }

    /// Overrides the reference count, e.g. with the number of map landmarks
    /// a freshly inserted keyframe observes.
    pub fn set_reference_inliers(&mut self, inliers: usize) {
        self.ref_inliers = inliers;
    }

    /// Processes one tracked frame. On insertion the frame becomes the new
    /// reference keyframe with its own inlier count.
    pub fn step(
        &mut self,
        inliers_cur: usize,
        position: Vector3<f64>,
        timestamp: f64,
    ) -> Result<DecisionRecord, KeyframeError> {
        if !(timestamp > self.last_timestamp) {
            return Err(KeyframeError::NonIncreasingTimestamp {
                prev: self.last_timestamp,
                next: timestamp,
            });
        }
        let dt = timestamp - self.last_timestamp;
        self.last_timestamp = timestamp;
        let stats = FrameStats {
            inliers_cur,
            inliers_ref: self.ref_inliers,
            position,
            timestamp,
        };
        let error = self.ref_inliers as f64 - inliers_cur as f64;
        let (pid, delta_pid) = pid_update(&self.pid, error, dt);
        self.pid = pid;
        let (kalman, v_hat) = kalman_velocity(&self.kalman, &self.ref_position, &position, timestamp - self.ref_timestamp);
        self.kalman = kalman;
        let decision = decide(&stats, delta_pid, v_hat, self.params.ratio, self.params.v_gate);
        if decision.insert {
            self.ref_inliers = inliers_cur;
            self.ref_position = position;
            self.ref_timestamp = timestamp;
        }
        let rec = DecisionRecord {
            stats,
            delta_pid,
            v_hat,
            decision,
        };
        self.log.push(rec);
        Ok(rec)
    }

    pub fn log(&self) -> &[DecisionRecord] {
        &self.log
    }

    pub fn insert_count(&self) -> usize {
        self.log.iter().filter(|r| r.decision.insert).count()
    }
}

pub fn format_decision_log(records: &[DecisionRecord]) -> String {
    let mut out = String::from("timestamp,inliers_cur,inliers_ref,delta_pid,v_hat,insert,reason\n");
    for r in records {
        let _ = writeln!(
            out,
            "{:.6},{},{},{:.6},{:.6},{},{}",
            r.stats.timestamp,
            r.stats.inliers_cur,
            r.stats.inliers_ref,
            r.delta_pid,
            r.v_hat,
            u8::from(r.decision.insert),
            r.decision.reason.as_str()
        );
    }
    out
}
