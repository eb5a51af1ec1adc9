//! Alert channel selection.

use comawatch_core::{AlertEvent, ChannelKind, DeliveryResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlertPolicy {
    /// Internet notification plus SMS whenever each is available.
    #[default]
    Both,
    /// Internet when up, SMS only as a fallback.
    FallbackOnly,
}

impl AlertPolicy {
    pub fn parse(s: &str) -> Option<AlertPolicy> {
        match s {
            "both" => Some(AlertPolicy::Both),
            "fallback_only" | "fallback-only" => Some(AlertPolicy::FallbackOnly),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AlertPolicy::Both => "both",
            AlertPolicy::FallbackOnly => "fallback_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelStates {
    pub internet_up: bool,
    pub gsm_up: bool,
}

impl ChannelStates {
    pub const ALL_UP: ChannelStates = ChannelStates {
        internet_up: true,
        gsm_up: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchReason {
    Primary,
    Fallback,
    Always,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchPlan {
    pub alert_id: String,
    pub steps: Vec<(ChannelKind, DispatchReason)>,
}

impl DispatchPlan {
    pub fn has_remote(&self) -> bool {
        self.steps.iter().any(|(c, _)| c.is_remote())
    }

    pub fn channels(&self) -> Vec<ChannelKind> {
        self.steps.iter().map(|(c, _)| *c).collect()
    }
}

/// Chooses channels for an alert. The bedside LED is always part of the
/// plan; a plan with no remote channel means the alert must wait for a
/// channel to come back.
pub fn dispatch_alert(alert: &AlertEvent, states: ChannelStates, policy: AlertPolicy) -> DispatchPlan {
    use DispatchReason::*;
    let mut steps = vec![(ChannelKind::LocalLed, Always)];
    match policy {
        AlertPolicy::Both => {
            if states.internet_up {
                steps.push((ChannelKind::Internet, Primary));
            }
            if states.gsm_up {
                steps.push((ChannelKind::GsmSms, Always));
            }
        }
        AlertPolicy::FallbackOnly => {
            if states.internet_up {
                steps.push((ChannelKind::Internet, Primary));
            } else if states.gsm_up {
                steps.push((ChannelKind::GsmSms, Fallback));
            }
        }
    }
    DispatchPlan {
        alert_id: alert.alert_id.clone(),
        steps,
    }
}

/// Executes remote dispatches.
pub trait Notifier {
    fn send(&mut self, channel: ChannelKind, alert: &AlertEvent, now_ms: u64) -> DeliveryResult;
}

/// Delivers every remote dispatch immediately; used by the live server,
/// where the dashboard feed is the notification sink.
#[derive(Debug, Default, Clone, Copy)]
pub struct ImmediateNotifier;

impl Notifier for ImmediateNotifier {
    fn send(&mut self, channel: ChannelKind, alert: &AlertEvent, _now_ms: u64) -> DeliveryResult {
        log::info!(
            "alert {} ({}) notified via {}",
            alert.alert_id,
            alert.cause.code(),
            channel.code()
        );
        DeliveryResult::Delivered { latency_ms: 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use comawatch_core::{AlertCause, Severity};

    fn alert() -> AlertEvent {
        AlertEvent {
            alert_id: "dev1-2".into(),
            device_id: "dev1".into(),
            patient_id: "p1".into(),
            cause: AlertCause::LowHeartRate,
            severity: Severity::Critical,
            raised_at_ms: 0,
            sample_seq: None,
            dispatches: vec![],
            ack: None,
        }
    }

    #[test]
    fn plan_examples() {
        use ChannelKind::*;
        use DispatchReason::*;
        let both = dispatch_alert(&alert(), ChannelStates::ALL_UP, AlertPolicy::Both);
        assert_eq!(both.steps, vec![(LocalLed, Always), (Internet, Primary), (GsmSms, Always)]);

        let down = ChannelStates {
            internet_up: false,
            gsm_up: true,
        };
        let fb = dispatch_alert(&alert(), down, AlertPolicy::FallbackOnly);
        assert_eq!(fb.steps, vec![(LocalLed, Always), (GsmSms, Fallback)]);

        let fb_up = dispatch_alert(&alert(), ChannelStates::ALL_UP, AlertPolicy::FallbackOnly);
        assert_eq!(fb_up.steps, vec![(LocalLed, Always), (Internet, Primary)]);

        let dark = ChannelStates {
            internet_up: false,
            gsm_up: false,
        };
        for policy in [AlertPolicy::Both, AlertPolicy::FallbackOnly] {
            let p = dispatch_alert(&alert(), dark, policy);
            assert_eq!(p.steps, vec![(LocalLed, Always)]);
            assert!(!p.has_remote());
        }
    }

    #[test]
    fn every_combination_includes_led_and_a_live_channel() {
        for internet_up in [false, true] {
            for gsm_up in [false, true] {
                for policy in [AlertPolicy::Both, AlertPolicy::FallbackOnly] {
                    let states = ChannelStates { internet_up, gsm_up };
                    let plan = dispatch_alert(&alert(), states, policy);
                    assert_eq!(plan.steps[0].0, ChannelKind::LocalLed);
                    assert_eq!(plan.has_remote(), internet_up || gsm_up);
                    for (c, _) in &plan.steps {
                        match c {
                            ChannelKind::Internet => assert!(internet_up),
                            ChannelKind::GsmSms => assert!(gsm_up),
                            ChannelKind::LocalLed => {}
                        }
                    }
                }
            }
        }
    }
}
