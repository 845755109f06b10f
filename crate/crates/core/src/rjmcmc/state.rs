//! Mutable chain state with O(log n) birth, death and neighbour lookup.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::shot::{JumpEvent, Sizes, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct Jump {
    pub time: f64,
    pub sizes: Sizes,
    id: u64,
}

/// Latent trajectory as updated by the sampler. Jumps live in an unordered
/// slot vector; a time index keyed by `(time, id)` keeps arrival order.
#[derive(Debug, Clone)]
pub struct ChainState {
    initial: Sizes,
    horizon: f64,
    slots: Vec<Jump>,
    index: BTreeMap<(u64, u64), usize>,
    next_id: u64,
}

fn key(time: f64, id: u64) -> (u64, u64) {
    // Non-negative floats order like their bit patterns.
    (time.to_bits(), id)
}

impl ChainState {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let mut s = Self {
            initial: traj.initial_values().iter().copied().collect(),
            horizon: traj.horizon(),
            slots: Vec::with_capacity(traj.len()),
            index: BTreeMap::new(),
            next_id: 0,
        };
        for j in traj.jumps() {
            s.insert(j.time, j.sizes.clone());
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.initial.len()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn jump(&self, slot: usize) -> &Jump {
        &self.slots[slot]
    }

    /// Jumps in slot order (not time order).
    pub fn jumps(&self) -> &[Jump] {
        &self.slots
    }

    pub fn set_initial(&mut self, values: &[f64]) {
        self.initial = values.iter().copied().collect();
    }

    pub fn insert(&mut self, time: f64, sizes: Sizes) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        let slot = self.slots.len();
        self.slots.push(Jump { time, sizes, id });
        self.index.insert(key(time, id), slot);
        slot
    }

    pub fn remove(&mut self, slot: usize) -> Result<Jump> {
        if slot >= self.slots.len() {
            return Err(Error::OutOfRange { index: slot, len: self.slots.len() });
        }
        let removed = self.slots.swap_remove(slot);
        self.index.remove(&key(removed.time, removed.id));
        if slot < self.slots.len() {
            let moved = &self.slots[slot];
            if let Some(v) = self.index.get_mut(&key(moved.time, moved.id)) {
                *v = slot;
            }
        }
        Ok(removed)
    }

    pub fn set_time(&mut self, slot: usize, time: f64) {
        let j = &mut self.slots[slot];
        self.index.remove(&key(j.time, j.id));
        j.time = time;
        self.index.insert(key(time, j.id), slot);
    }

    pub fn set_sizes(&mut self, slot: usize, sizes: Sizes) {
        self.slots[slot].sizes = sizes;
    }

    /// Arrival times of the neighbours of `slot`, with `0` and the horizon
    /// standing in at the ends.
    pub fn neighbour_times(&self, slot: usize) -> (f64, f64) {
        let j = &self.slots[slot];
        let k = key(j.time, j.id);
        let prev = self.index.range(..k).next_back().map(|(_, &s)| self.slots[s].time).unwrap_or(0.0);
        let next = self
            .index
            .range((std::ops::Bound::Excluded(k), std::ops::Bound::Unbounded))
            .next()
            .map(|(_, &s)| self.slots[s].time)
            .unwrap_or(self.horizon);
        (prev, next)
    }

    /// Time-ordered snapshot.
    pub fn to_trajectory(&self) -> Result<Trajectory> {
        let jumps = self
            .index
            .values()
            .map(|&s| {
                let j = &self.slots[s];
                JumpEvent { time: j.time, sizes: j.sizes.clone() }
            })
            .collect();
        Trajectory::new(self.initial.clone(), jumps, self.horizon)
    }

    /// Slots in time order.
    pub fn ordered_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.index.values().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use smallvec::smallvec;

    #[test]
    fn neighbours_follow_time_order() {
        let traj = Trajectory::new(smallvec![1.0] as Sizes, vec![], 10.0).unwrap();
        let mut s = ChainState::from_trajectory(&traj);
        let a = s.insert(5.0, smallvec![1.0]);
        let b = s.insert(2.0, smallvec![1.0]);
        let c = s.insert(8.0, smallvec![1.0]);
        assert_eq!(s.neighbour_times(a), (2.0, 8.0));
        assert_eq!(s.neighbour_times(b), (0.0, 5.0));
        assert_eq!(s.neighbour_times(c), (5.0, 10.0));
        s.remove(b).unwrap();
        // The last slot moved into b's place.
        assert_eq!(s.jump(b).time, 8.0);
        assert_eq!(s.neighbour_times(b), (5.0, 10.0));
        s.set_time(b, 1.0);
        let t = s.to_trajectory().unwrap();
        let times: Vec<f64> = t.jumps().iter().map(|j| j.time).collect();
        assert_eq!(times, vec![1.0, 5.0]);
    }
}
