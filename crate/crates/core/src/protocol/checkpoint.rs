//! How a scaling injection combines with a checkpoint already in flight.

use crate::channel::Channel;

/// Emission plan for one predecessor channel toward the subscale source.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum InjectionPlan {
    /// No checkpoint in flight on this channel: priority trigger, confirm at
    /// the front of the output cache, full redirection.
    Plain,
    /// The checkpoint barrier still sits in the output cache at `barrier`.
    /// Redirection covers only messages behind it, and a fused
    /// trigger+confirm signal is placed right after it.
    Fused { barrier: usize },
    /// The checkpoint barrier already reached the receiver's input. The
    /// confirm goes out normally; migration starts when that barrier is
    /// processed.
    Integrated,
}

/// Chooses the plan for `channel` given where an unprocessed checkpoint
/// barrier sits, if any.
pub fn merge_with_checkpoint(channel: &Channel) -> InjectionPlan {
    if let Some(barrier) = channel.cache_checkpoint_position() {
        InjectionPlan::Fused { barrier }
    } else if channel.input_has_checkpoint() {
        InjectionPlan::Integrated
    } else {
        InjectionPlan::Plain
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Lane;
    use crate::ids::{ChannelId, InstanceId};
    use crate::message::StreamMessage;

    #[test]
    fn plan_follows_barrier_position() {
        let mut ch = Channel::new(ChannelId(0), InstanceId(0), InstanceId(1), 1);
        assert_eq!(merge_with_checkpoint(&ch), InjectionPlan::Plain);
        let r = StreamMessage::data(InstanceId(0), 1, b"r".to_vec(), 1, 0);
        ch.enqueue(r.clone(), Lane::Normal, 0, 1).unwrap();
        ch.enqueue(
            StreamMessage::checkpoint(InstanceId(0), 2, 7, 0),
            Lane::Normal,
            0,
            1,
        )
        .unwrap();
        ch.enqueue(r, Lane::Normal, 0, 1).unwrap();
        // Capacity 1: only the first record is on the wire.
        ch.transmit(0, 1);
        assert_eq!(
            merge_with_checkpoint(&ch),
            InjectionPlan::Fused { barrier: 0 }
        );
        ch.pop_normal();
        ch.transmit(1, 1);
        assert_eq!(merge_with_checkpoint(&ch), InjectionPlan::Integrated);
    }
}
