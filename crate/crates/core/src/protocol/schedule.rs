//! Input selection: plain FIFO or scale-aware record scheduling.

use serde::{Deserialize, Serialize};

use crate::channel::Channel;
use crate::ids::{ChannelId, Tick};
use crate::message::{MessageKind, StreamMessage};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulingConfig {
    /// Switch to another channel whose head is processable.
    pub inter_channel: bool,
    /// Bypass unprocessable records within a channel.
    pub intra_channel: bool,
    /// How far into a channel intra-channel scheduling may look.
    pub buffer: usize,
    /// Allow crossing watermarks (order-insensitive jobs only).
    pub relaxed_ordering: bool,
}

impl Default for SchedulingConfig {
    fn default() -> Self {
        SchedulingConfig {
            inter_channel: true,
            intra_channel: true,
            buffer: 200,
            relaxed_ordering: false,
        }
    }
}

impl SchedulingConfig {
    pub fn disabled() -> Self {
        SchedulingConfig {
            inter_channel: false,
            intra_channel: false,
            ..Self::default()
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.inter_channel || self.intra_channel
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Pop the head of the channel's priority lane.
    Priority { channel: ChannelId },
    /// Take the normal-lane message at `index`.
    Take { channel: ChannelId, index: usize },
    /// Input is waiting but nothing may be processed.
    Suspended { channel: ChannelId },
    /// No input has arrived.
    Idle,
}

/// Picks the next message for an instance reading `inputs`.
///
/// `current` is the index into `inputs` of the channel served last. Channels for
/// which `blocked` holds are skipped on the normal lane. Non-data messages
/// are always processable; `processable` decides for data records.
pub fn next_message(
    channels: &[Channel],
    inputs: &[ChannelId],
    now: Tick,
    current: &mut usize,
    sched: &SchedulingConfig,
    blocked: impl Fn(ChannelId) -> bool,
    mut processable: impl FnMut(ChannelId, &StreamMessage) -> bool,
) -> Selection {
    if inputs.is_empty() {
        return Selection::Idle;
    }
    for &c in inputs {
        if channels[c.index()].priority_head(now).is_some() {
            return Selection::Priority { channel: c };
        }
    }
    let n = inputs.len();
    let mut ok = |c: ChannelId, m: &StreamMessage| m.kind != MessageKind::Data || processable(c, m);
    let head = |c: ChannelId| {
        if blocked(c) {
            None
        } else {
            channels[c.index()].normal_head(now)
        }
    };

    let mut first_stuck = None;
    if sched.inter_channel {
        let mut pick: Option<(Tick, usize)> = None;
        for (i, &c) in inputs.iter().enumerate() {
            if let Some(q) = head(c) {
                if ok(c, &q.msg) {
                    if pick.is_none_or(|(t, _)| q.arrive_at < t) {
                        pick = Some((q.arrive_at, i));
                    }
                } else {
                    first_stuck.get_or_insert(c);
                }
            }
        }
        if let Some((_, i)) = pick {
            *current = i;
            return Selection::Take {
                channel: inputs[i],
                index: 0,
            };
        }
    } else {
        // Earliest arrival first, as a plain FIFO input handler would.
        let pick = inputs
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| head(c).map(|q| (q.arrive_at, c, i)))
            .min();
        if let Some((_, c, i)) = pick {
            let q = head(c).expect("head exists");
            if ok(c, &q.msg) {
                *current = i;
                return Selection::Take {
                    channel: c,
                    index: 0,
                };
            }
            first_stuck = Some(c);
        }
    }
    let Some(stuck) = first_stuck else {
        return Selection::Idle;
    };

    if sched.intra_channel {
        for step in 0..n {
            let i = (*current + step) % n;
            let c = inputs[i];
            if blocked(c) {
                continue;
            }
            for (idx, q) in channels[c.index()]
                .arrived_window(now, sched.buffer)
                .enumerate()
                .skip(1)
            {
                let kind = q.msg.kind;
                if kind.is_barrier() || (kind.is_time_signal() && !sched.relaxed_ordering) {
                    break;
                }
                if kind.is_time_signal() {
                    continue;
                }
                if ok(c, &q.msg) {
                    *current = i;
                    return Selection::Take {
                        channel: c,
                        index: idx,
                    };
                }
            }
        }
    }
    Selection::Suspended { channel: stuck }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Lane;
    use crate::ids::InstanceId;

    fn data(seq: u64, key: &str) -> StreamMessage {
        StreamMessage::data(InstanceId(0), seq, key.as_bytes().to_vec(), 1, 0)
    }

    fn setup(contents: &[Vec<StreamMessage>]) -> (Vec<Channel>, Vec<ChannelId>) {
        let mut chans = Vec::new();
        for (i, msgs) in contents.iter().enumerate() {
            let mut ch = Channel::new(
                ChannelId(i as u32),
                InstanceId(i as u32),
                InstanceId(9),
                1000,
            );
            for m in msgs {
                ch.enqueue(m.clone(), Lane::Normal, 0, 0).unwrap();
            }
            ch.transmit(0, 0);
            chans.push(ch);
        }
        let ids = chans.iter().map(|c| c.id).collect();
        (chans, ids)
    }

    fn blocked_key(m: &StreamMessage) -> bool {
        m.key.as_deref() == Some(b"x".as_slice())
    }

    #[test]
    fn inter_channel_switches_to_processable_channel() {
        let (chans, ids) = setup(&[vec![data(1, "a")], vec![data(2, "x")]]);
        let mut cur = 1;
        let sel = next_message(
            &chans,
            &ids,
            0,
            &mut cur,
            &SchedulingConfig::default(),
            |_| false,
            |_, m| !blocked_key(m),
        );
        assert_eq!(
            sel,
            Selection::Take {
                channel: ChannelId(0),
                index: 0
            }
        );
        assert_eq!(cur, 0);
    }

    #[test]
    fn intra_channel_bypasses_unprocessable_records() {
        let (chans, ids) = setup(&[
            vec![data(1, "x")],
            vec![data(2, "x"), data(3, "x"), data(4, "a")],
        ]);
        let mut cur = 0;
        let sel = next_message(
            &chans,
            &ids,
            0,
            &mut cur,
            &SchedulingConfig::default(),
            |_| false,
            |_, m| !blocked_key(m),
        );
        assert_eq!(
            sel,
            Selection::Take {
                channel: ChannelId(1),
                index: 2
            }
        );
    }

    #[test]
    fn scheduling_never_crosses_watermarks_or_barriers() {
        let wm = StreamMessage::watermark(InstanceId(0), 5, 10);
        let ckpt = StreamMessage::checkpoint(InstanceId(0), 6, 1, 0);
        let (chans, ids) = setup(&[
            vec![data(1, "x"), wm.clone(), data(2, "a")],
            vec![data(3, "x"), ckpt, data(4, "a")],
        ]);
        let mut cur = 0;
        let sel = next_message(
            &chans,
            &ids,
            0,
            &mut cur,
            &SchedulingConfig::default(),
            |_| false,
            |_, m| !blocked_key(m),
        );
        assert_eq!(
            sel,
            Selection::Suspended {
                channel: ChannelId(0)
            }
        );

        let relaxed = SchedulingConfig {
            relaxed_ordering: true,
            ..SchedulingConfig::default()
        };
        let sel = next_message(
            &chans,
            &ids,
            0,
            &mut cur,
            &relaxed,
            |_| false,
            |_, m| !blocked_key(m),
        );
        assert_eq!(
            sel,
            Selection::Take {
                channel: ChannelId(0),
                index: 2
            }
        );
    }

    #[test]
    fn plain_mode_blocks_on_earliest_head() {
        let (chans, ids) = setup(&[vec![data(1, "x")], vec![data(2, "a")]]);
        let mut cur = 0;
        let sel = next_message(
            &chans,
            &ids,
            0,
            &mut cur,
            &SchedulingConfig::disabled(),
            |_| false,
            |_, m| !blocked_key(m),
        );
        assert_eq!(
            sel,
            Selection::Suspended {
                channel: ChannelId(0)
            }
        );
    }

    #[test]
    fn priority_lane_and_markers_are_always_eligible() {
        let (mut chans, ids) = setup(&[vec![
            data(1, "x"),
            StreamMessage::marker(InstanceId(0), 2, 0),
        ]]);
        let mut cur = 0;
        let sel = next_message(
            &chans,
            &ids,
            0,
            &mut cur,
            &SchedulingConfig::default(),
            |_| false,
            |_, m| !blocked_key(m),
        );
        assert_eq!(
            sel,
            Selection::Take {
                channel: ChannelId(0),
                index: 1
            }
        );
        chans[0]
            .enqueue(
                StreamMessage::trigger(InstanceId(0), 3, crate::ids::SubscaleId(0), 0),
                Lane::Priority,
                0,
                0,
            )
            .unwrap();
        let sel = next_message(
            &chans,
            &ids,
            0,
            &mut cur,
            &SchedulingConfig::disabled(),
            |_| true,
            |_, _| true,
        );
        assert_eq!(
            sel,
            Selection::Priority {
                channel: ChannelId(0)
            }
        );
    }

    #[test]
    fn nothing_arrived_is_idle() {
        let (chans, ids) = setup(&[vec![]]);
        let mut cur = 0;
        let sel = next_message(
            &chans,
            &ids,
            0,
            &mut cur,
            &SchedulingConfig::default(),
            |_| false,
            |_, _| true,
        );
        assert_eq!(sel, Selection::Idle);
    }
}
