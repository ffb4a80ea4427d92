//! Fixed-order collectives.
//!
//! The root of a reduction receives every contribution and sums them in
//! ascending member order, starting from the lowest member's vector, so the
//! result does not depend on arrival order, scheduling, or backend.
//! Allreduce is reduce-to-lowest-member followed by broadcast from it.

use super::{Endpoint, RankId, TransportError};
use crate::numerics::ParamVector;

/// Ordered set of ranks with a root for rooted collectives. `tag` namespaces
/// the group's traffic so that groups sharing members never cross-talk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGroup {
    members: Vec<RankId>,
    root: RankId,
    tag: u32,
}

const MAX_GROUP_TAG: u32 = u32::MAX / 4;

impl CommGroup {
    pub fn new(mut members: Vec<RankId>, root: RankId, tag: u32) -> Result<Self, TransportError> {
        members.sort_unstable();
        if members.is_empty() {
            return Err(TransportError::InvalidGroup("group has no members".into()));
        }
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(TransportError::InvalidGroup("duplicate member".into()));
        }
        if !members.contains(&root) {
            return Err(TransportError::InvalidGroup(format!("root {root} is not a member")));
        }
        if tag > MAX_GROUP_TAG {
            return Err(TransportError::InvalidGroup(format!(
                "tag {tag} exceeds {MAX_GROUP_TAG}"
            )));
        }
        Ok(CommGroup { members, root, tag })
    }

    /// Group rooted at its lowest member.
    pub fn lowest_rooted(members: Vec<RankId>, tag: u32) -> Result<Self, TransportError> {
        let root = *members
            .iter()
            .min()
            .ok_or_else(|| TransportError::InvalidGroup("group has no members".into()))?;
        Self::new(members, root, tag)
    }

    pub fn members(&self) -> &[RankId] {
        &self.members
    }

    pub fn root(&self) -> RankId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn reduce_tag(&self) -> u32 {
        self.tag * 4
    }

    fn broadcast_tag(&self) -> u32 {
        self.tag * 4 + 1
    }

    fn check_member(&self, rank: RankId, world: usize) -> Result<(), TransportError> {
        if let Some(&bad) = self.members.iter().find(|&&m| m >= world) {
            return Err(TransportError::UnknownRank { rank: bad, world });
        }
        if self.members.binary_search(&rank).is_err() {
            return Err(TransportError::NotAMember { rank });
        }
        Ok(())
    }
}

/// Elementwise sum at the root (`Some`), `None` at every other member.
pub fn reduce_to_root(
    ep: &dyn Endpoint,
    group: &CommGroup,
    contribution: &[f64],
) -> Result<Option<ParamVector>, TransportError> {
    let me = ep.rank();
    group.check_member(me, ep.world_size())?;
    if me != group.root {
        ep.send(group.root, group.reduce_tag(), contribution)?;
        return Ok(None);
    }
    let mut acc: Option<ParamVector> = None;
    for &m in &group.members {
        let received;
        let part: &[f64] = if m == me {
            contribution
        } else {
            received = ep.recv(m, group.reduce_tag())?.payload;
            &received
        };
        if part.len() != contribution.len() {
            return Err(TransportError::LengthMismatch {
                member: m,
                expected: contribution.len(),
                got: part.len(),
            });
        }
        match acc.as_mut() {
            Some(a) => a.add_assign(part),
            None => acc = Some(ParamVector::from(part.to_vec())),
        }
    }
    Ok(acc)
}

/// Every member ends with a copy of the root's `payload`. Only the root's
/// `payload` is read; other members may pass `None`.
pub fn broadcast(ep: &dyn Endpoint, group: &CommGroup, payload: Option<&[f64]>) -> Result<ParamVector, TransportError> {
    let me = ep.rank();
    group.check_member(me, ep.world_size())?;
    if me == group.root {
        let payload = payload.ok_or_else(|| TransportError::Protocol("broadcast root supplied no payload".into()))?;
        for &m in group.members.iter().filter(|&&m| m != me) {
            ep.send(m, group.broadcast_tag(), payload)?;
        }
        Ok(ParamVector::from(payload.to_vec()))
    } else {
        Ok(ParamVector::from(ep.recv(group.root, group.broadcast_tag())?.payload))
    }
}

/// Elementwise sum at every member: fixed-order reduce to the lowest member,
/// then broadcast from it. `group.root()` is ignored.
pub fn allreduce(ep: &dyn Endpoint, group: &CommGroup, contribution: &[f64]) -> Result<ParamVector, TransportError> {
    let rooted = CommGroup {
        root: group.members[0],
        ..group.clone()
    };
    let sum = reduce_to_root(ep, &rooted, contribution)?;
    broadcast(ep, &rooted, sum.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::inprocess_world;
    use std::thread;
    use std::time::Duration;

    fn run_world<T: Send>(n: usize, f: impl Fn(&dyn Endpoint) -> T + Sync) -> Vec<T> {
        let eps = inprocess_world(n, Duration::from_secs(5));
        thread::scope(|s| {
            let hs: Vec<_> = eps.iter().map(|ep| s.spawn(|| f(ep))).collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    #[test]
    fn reduce_sums_at_root_only() {
        let out = run_world(3, |ep| {
            let g = CommGroup::new(vec![0, 1, 2], 2, 1).unwrap();
            let mine = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]][ep.rank()];
            reduce_to_root(ep, &g, &mine).unwrap()
        });
        assert_eq!(out[0], None);
        assert_eq!(out[1], None);
        assert_eq!(out[2].as_deref(), Some(&[9.0, 12.0][..]));
    }

    #[test]
    fn reduce_matches_scalar_loop_bitwise() {
        let inputs: Vec<Vec<f64>> = (0..5)
            .map(|r| {
                (0..7)
                    .map(|k| 0.1 * (r as f64 + 1.0) / (k as f64 + 3.0) + 1e-17 * r as f64)
                    .collect()
            })
            .collect();
        let out = run_world(5, |ep| {
            let g = CommGroup::new(vec![0, 1, 2, 3, 4], 3, 2).unwrap();
            reduce_to_root(ep, &g, &inputs[ep.rank()]).unwrap()
        });
        let got = out[3].clone().unwrap();
        for k in 0..7 {
            let mut s = inputs[0][k];
            for input in &inputs[1..5] {
                s += input[k];
            }
            assert_eq!(got[k].to_bits(), s.to_bits());
        }
    }

    #[test]
    fn singletons_are_identity() {
        let out = run_world(1, |ep| {
            let g = CommGroup::new(vec![0], 0, 0).unwrap();
            let r = reduce_to_root(ep, &g, &[1.0, -0.0]).unwrap().unwrap();
            let a = allreduce(ep, &g, &[2.0]).unwrap();
            let b = broadcast(ep, &g, Some(&[3.0])).unwrap();
            (r, a, b)
        });
        let (r, a, b) = &out[0];
        assert_eq!(r[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(&a[..], &[2.0]);
        assert_eq!(&b[..], &[3.0]);
    }

    #[test]
    fn allreduce_and_broadcast_agree_everywhere() {
        let out = run_world(4, |ep| {
            let g = CommGroup::lowest_rooted(vec![0, 1, 2, 3], 3).unwrap();
            let a = allreduce(ep, &g, &[1.0]).unwrap();
            let bg = CommGroup::new(vec![0, 1, 2, 3], 1, 4).unwrap();
            let b = broadcast(ep, &bg, (ep.rank() == 1).then_some(&[1.0, 2.0, 3.0][..])).unwrap();
            let r = reduce_to_root(ep, &g, &[ep.rank() as f64]).unwrap();
            let composed = broadcast(ep, &g, r.as_deref()).unwrap();
            let direct = allreduce(ep, &g, &[ep.rank() as f64]).unwrap();
            (a, b, composed, direct)
        });
        for (a, b, c, d) in &out {
            assert_eq!(&a[..], &[4.0]);
            assert_eq!(&b[..], &[1.0, 2.0, 3.0]);
            assert!(c.bitwise_eq(d));
        }
    }

    #[test]
    fn length_mismatch_is_reported_at_root() {
        let out = run_world(2, |ep| {
            let g = CommGroup::new(vec![0, 1], 0, 0).unwrap();
            let mine: &[f64] = if ep.rank() == 0 { &[1.0, 2.0] } else { &[1.0] };
            reduce_to_root(ep, &g, mine)
        });
        assert!(matches!(out[0], Err(TransportError::LengthMismatch { member: 1, .. })));
    }

    #[test]
    fn missing_participant_times_out() {
        let eps = inprocess_world(2, Duration::from_millis(50));
        let g = CommGroup::new(vec![0, 1], 0, 0).unwrap();
        assert!(matches!(
            reduce_to_root(&eps[0], &g, &[1.0]),
            Err(TransportError::Timeout { peer: 1, .. })
        ));
    }

    #[test]
    fn group_validation() {
        assert!(CommGroup::new(vec![], 0, 0).is_err());
        assert!(CommGroup::new(vec![0, 0], 0, 0).is_err());
        assert!(CommGroup::new(vec![0, 1], 5, 0).is_err());
        let g = CommGroup::new(vec![3, 1, 2], 2, 0).unwrap();
        assert_eq!(g.members(), &[1, 2, 3]);
        let eps = inprocess_world(2, Duration::from_millis(10));
        let g = CommGroup::new(vec![1], 1, 0).unwrap();
        assert!(matches!(
            reduce_to_root(&eps[0], &g, &[]),
            Err(TransportError::NotAMember { rank: 0 })
        ));
    }
}
