use crate::error::{Error, Result};

/// Binary tree over a power-of-two number of non-negative leaves where each
/// internal node holds the sum of its children. Node 1 is the root and leaf
/// `i` lives at `capacity + i`.
#[derive(Debug, Clone)]
pub struct SumTree {
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 || !capacity.is_power_of_two() {
            return Err(Error::config(format!("sum-tree capacity {capacity} must be a positive power of two")));
        }
        Ok(Self {
            capacity,
            nodes: vec![0.0; 2 * capacity],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.capacity + leaf]
    }

    pub fn set(&mut self, leaf: usize, value: f64) -> Result<()> {
        if leaf >= self.capacity {
            return Err(Error::input(format!("leaf {leaf} outside capacity {}", self.capacity)));
        }
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::input(format!("leaf value {value} must be finite and non-negative")));
        }
        let mut node = self.capacity + leaf;
        self.nodes[node] = value;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
        Ok(())
    }

    /// Recomputes every internal node from the leaves.
    pub fn rebuild(&mut self) {
        for node in (1..self.capacity).rev() {
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    /// Smallest leaf whose inclusive prefix sum exceeds `mass`, skipping
    /// zero-valued leaves. `mass` is clamped into `[0, total)`.
    pub fn find(&self, mass: f64) -> usize {
        let mut mass = mass.max(0.0);
        let mut node = 1;
        while node < self.capacity {
            let left = self.nodes[2 * node];
            if mass < left || self.nodes[2 * node + 1] <= 0.0 {
                node *= 2;
            } else {
                mass -= left;
                node = 2 * node + 1;
            }
        }
        node - self.capacity
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
}

/// Same layout as [`SumTree`] with `max` in place of `+`.
#[derive(Debug, Clone)]
pub(crate) struct MaxTree {
    capacity: usize,
    nodes: Vec<f64>,
}

impl MaxTree {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            nodes: vec![0.0; 2 * capacity],
        }
    }

    pub fn max(&self) -> f64 {
        self.nodes[1]
    }

    pub fn set(&mut self, leaf: usize, value: f64) {
        let mut node = self.capacity + leaf;
        self.nodes[node] = value;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node].max(self.nodes[2 * node + 1]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn find_walks_prefix_sums() {
        let mut t = SumTree::new(4).unwrap();
        for (i, v) in [1.0, 0.0, 2.0, 3.0].into_iter().enumerate() {
            t.set(i, v).unwrap();
        }
        assert_eq!(t.total(), 6.0);
        assert_eq!(t.find(0.0), 0);
        assert_eq!(t.find(0.999), 0);
        assert_eq!(t.find(1.0), 2);
        assert_eq!(t.find(2.999), 2);
        assert_eq!(t.find(3.0), 3);
        assert_eq!(t.find(6.0), 3);
        assert_eq!(t.find(100.0), 3);
    }

    #[test]
    fn find_skips_trailing_empty_leaves() {
        let mut t = SumTree::new(8).unwrap();
        t.set(0, 0.5).unwrap();
        t.set(1, 0.25).unwrap();
        assert_eq!(t.find(0.75), 1);
        assert_eq!(t.find(10.0), 1);
    }

    #[test]
    fn rejects_bad_capacity_and_values() {
        assert!(SumTree::new(0).is_err());
        assert!(SumTree::new(6).is_err());
        let mut t = SumTree::new(2).unwrap();
        assert!(t.set(2, 1.0).is_err());
        assert!(t.set(0, -1.0).is_err());
        assert!(t.set(0, f64::NAN).is_err());
    }
}
