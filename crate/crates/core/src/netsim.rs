//! Channel models for the Wi-Fi/internet path and the GSM/SMS path.
//!
//! Each send draws exactly two uniforms from the caller's generator (one for
//! loss, one for latency) whenever the channel is up, so a run with a lower
//! loss probability never turns an earlier delivery into a loss and the
//! generator stays aligned across configurations.

use alloc::vec::Vec;

use rand_core::RngCore;
use thiserror::Error;

use crate::model::ChannelKind;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("loss probability {0} outside [0, 1]")]
    LossProbability(f64),
    #[error("latency jitter {jitter} exceeds mean {mean}")]
    Jitter { mean: u64, jitter: u64 },
    #[error("outage [{from}, {to}) is empty or out of order")]
    Outage { from: u64, to: u64 },
    #[error("expected a {expected:?} channel, got {actual:?}")]
    WrongChannel {
        expected: ChannelKind,
        actual: ChannelKind,
    },
}

/// Half-open interval `[from_ms, to_ms)` during which a channel is down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Outage {
    pub from_ms: u64,
    pub to_ms: u64,
}

impl Outage {
    pub fn new(from_ms: u64, to_ms: u64) -> Outage {
        Outage { from_ms, to_ms }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    pub kind: ChannelKind,
    pub loss_prob: f64,
    pub latency_mean_ms: u64,
    pub latency_jitter_ms: u64,
    outages: Vec<Outage>,
}

impl ChannelModel {
    pub fn new(
        kind: ChannelKind,
        loss_prob: f64,
        latency_mean_ms: u64,
        latency_jitter_ms: u64,
        outages: Vec<Outage>,
    ) -> Result<ChannelModel, NetError> {
        if !(0.0..=1.0).contains(&loss_prob) {
            return Err(NetError::LossProbability(loss_prob));
        }
        if latency_jitter_ms > latency_mean_ms {
            return Err(NetError::Jitter {
                mean: latency_mean_ms,
                jitter: latency_jitter_ms,
            });
        }
        let mut prev_end = 0;
        for o in &outages {
            if o.from_ms >= o.to_ms || o.from_ms < prev_end {
                return Err(NetError::Outage {
                    from: o.from_ms,
                    to: o.to_ms,
                });
            }
            prev_end = o.to_ms;
        }
        Ok(ChannelModel {
            kind,
            loss_prob,
            latency_mean_ms,
            latency_jitter_ms,
            outages,
        })
    }

    /// Wi-Fi link with 2% per-attempt loss.
    pub fn internet_default() -> ChannelModel {
        ChannelModel::new(ChannelKind::Internet, 0.02, 50, 25, Vec::new())
            .expect("default internet model is valid")
    }

    /// GSM modem: 4.2 s mean delivery, ±0.6 s, lossless.
    pub fn gsm_default() -> ChannelModel {
        ChannelModel::new(ChannelKind::GsmSms, 0.0, 4200, 600, Vec::new())
            .expect("default gsm model is valid")
    }

    pub fn outages(&self) -> &[Outage] {
        &self.outages
    }

    /// Times at which the channel changes state, ascending.
    pub fn transitions(&self) -> impl Iterator<Item = u64> + '_ {
        self.outages.iter().flat_map(|o| [o.from_ms, o.to_ms])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryResult {
    Delivered { latency_ms: u64 },
    Lost,
    ChannelDown,
}

impl DeliveryResult {
    pub fn is_delivered(self) -> bool {
        matches!(self, DeliveryResult::Delivered { .. })
    }
}

/// `false` iff `t_ms` falls inside one of the model's outage intervals.
pub fn is_up(model: &ChannelModel, t_ms: u64) -> bool {
    let idx = model.outages.partition_point(|o| o.to_ms <= t_ms);
    match model.outages.get(idx) {
        Some(o) => t_ms < o.from_ms,
        None => true,
    }
}

pub fn channel_send<R: RngCore + ?Sized>(model: &ChannelModel, t_ms: u64, rng: &mut R) -> DeliveryResult {
    if !is_up(model, t_ms) {
        return DeliveryResult::ChannelDown;
    }
    let loss_draw = rng::unit(rng);
    let latency_draw = rng::unit(rng);
    if loss_draw < model.loss_prob {
        return DeliveryResult::Lost;
    }
    let span = 2 * model.latency_jitter_ms + 1;
    let offset = ((latency_draw * span as f64) as u64).min(span - 1);
    DeliveryResult::Delivered {
        latency_ms: model.latency_mean_ms - model.latency_jitter_ms + offset,
    }
}

/// SMS delivery through the GSM modem.
pub fn sms_send<R: RngCore + ?Sized>(
    model: &ChannelModel,
    t_ms: u64,
    rng: &mut R,
) -> Result<DeliveryResult, NetError> {
    if model.kind != ChannelKind::GsmSms {
        return Err(NetError::WrongChannel {
            expected: ChannelKind::GsmSms,
            actual: model.kind,
        });
    }
    Ok(channel_send(model, t_ms, rng))
}

/// Probability that a record survives `max_retries` retransmissions under
/// independent per-attempt loss: `1 - p^(k + 1)`.
pub fn eventual_delivery_prob(loss_prob: f64, max_retries: u32) -> f64 {
    1.0 - libm::pow(loss_prob, max_retries as f64 + 1.0)
}
