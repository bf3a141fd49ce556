use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Neurons on a line, with every ordered pair `(i, j)` forming a synapse
/// located at the midpoint of its two neurons.
///
/// Synapse `(i, j)` has flat index `i * n + j` in `pairwise_distances`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynapseGeometry {
    pub neuron_positions: Vec<f64>,
    pub synapse_midpoints: Matrix,
    pub pairwise_distances: Matrix,
}

impl SynapseGeometry {
    pub fn n_neurons(&self) -> usize {
        self.neuron_positions.len()
    }

    pub fn n_synapses(&self) -> usize {
        self.n_neurons() * self.n_neurons()
    }

    #[inline]
    pub fn synapse_index(&self, i: usize, j: usize) -> usize {
        i * self.n_neurons() + j
    }

    pub fn midpoint(&self, i: usize, j: usize) -> f64 {
        self.synapse_midpoints.get(i, j)
    }

    pub fn distance(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        self.pairwise_distances.get(self.synapse_index(a.0, a.1), self.synapse_index(b.0, b.1))
    }
}

pub fn build_geometry(n_neurons: usize, spacing: f64) -> Result<SynapseGeometry> {
    if n_neurons == 0 {
        return Err(Error::InvalidArgument("n_neurons must be at least 1".into()));
    }
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing}")));
    }
    let positions: Vec<f64> = (0..n_neurons).map(|i| i as f64 * spacing).collect();
    let midpoints = Matrix::from_fn(n_neurons, n_neurons, |i, j| 0.5 * (positions[i] + positions[j]));
    let flat = midpoints.data().to_vec();
    let n2 = flat.len();
    let distances = Matrix::from_fn(n2, n2, |a, b| (flat[a] - flat[b]).abs());
    Ok(SynapseGeometry { neuron_positions: positions, synapse_midpoints: midpoints, pairwise_distances: distances })
}

/// Distance-decayed coupling between astrocyte processes at synapse pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingTensor {
    pub values: Matrix,
    pub scale: f64,
}

impl CouplingTensor {
    /// Identity coupling: each process only sees itself.
    pub fn identity(n_synapses: usize) -> Self {
        Self { values: Matrix::identity(n_synapses), scale: f64::INFINITY }
    }

    pub fn n_synapses(&self) -> usize {
        self.values.rows()
    }

    /// Influence from source synapse `(i, j)` to every target, as an `n × n` grid.
    pub fn slice_from(&self, n_neurons: usize, i: usize, j: usize) -> Matrix {
        let row = self.values.row(i * n_neurons + j);
        Matrix::from_fn(n_neurons, n_neurons, |k, l| row[k * n_neurons + l])
    }
}

pub fn coupling_tensor(geometry: &SynapseGeometry, scale: f64) -> Result<CouplingTensor> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("coupling scale must be positive, got {scale}")));
    }
    let values = geometry.pairwise_distances.map(|d| (-d * scale).exp());
    Ok(CouplingTensor { values, scale })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_neuron_midpoints() {
        let g = build_geometry(2, 1.0).unwrap();
        assert_eq!(g.synapse_midpoints.data(), &[0.0, 0.5, 0.5, 1.0]);
        assert_eq!(g.distance((0, 1), (1, 0)), 0.0);
    }

    #[test]
    fn five_neurons_give_a_five_by_five_grid() {
        let g = build_geometry(5, 1.0).unwrap();
        assert_eq!(g.synapse_midpoints.shape(), (5, 5));
        assert_eq!(g.pairwise_distances.shape(), (25, 25));
        assert_eq!(g.midpoint(0, 4), 2.0);
        assert_eq!(g.midpoint(4, 4), 4.0);
    }

    #[test]
    fn three_neurons_spacing_two() {
        let g = build_geometry(3, 2.0).unwrap();
        assert_eq!(g.distance((0, 0), (2, 2)), 4.0);
    }

    #[test]
    fn distances_symmetric_zero_diagonal() {
        let g = build_geometry(4, 0.7).unwrap();
        let d = &g.pairwise_distances;
        assert_eq!(d, &d.transpose());
        for a in 0..d.rows() {
            assert_eq!(d.get(a, a), 0.0);
        }
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(g.midpoint(i, j), g.midpoint(j, i));
            }
        }
    }

    #[test]
    fn invalid_geometry_arguments() {
        assert!(matches!(build_geometry(0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_geometry(3, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_geometry(3, -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn coupling_values() {
        let g = build_geometry(3, 2.0).unwrap();
        let t = coupling_tensor(&g, 2.0).unwrap();
        for a in 0..t.n_synapses() {
            assert_eq!(t.values.get(a, a), 1.0);
        }
        // (0,0) at 0 and (0,1) at 1: distance 1.
        let v = t.values.get(g.synapse_index(0, 0), g.synapse_index(0, 1));
        assert!((v - (-2.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.1353).abs() < 1e-4);
        assert_eq!(t.values, t.values.transpose());
        assert!(t.values.data().iter().all(|&x| x > 0.0 && x <= 1.0));
        assert!(matches!(coupling_tensor(&g, 0.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn influence_narrows_with_scale() {
        let g = build_geometry(5, 1.0).unwrap();
        let sources = [(0, 0), (0, 2), (2, 2)];
        let tensors: Vec<_> = [2.0, 5.0, 20.0].iter().map(|&s| coupling_tensor(&g, s).unwrap()).collect();
        for &(i, j) in &sources {
            let mass: Vec<f64> = tensors.iter().map(|t| t.slice_from(5, i, j).sum()).collect();
            assert!(mass[0] > mass[1] && mass[1] > mass[2], "source ({i},{j}): {mass:?}");
            for pair in tensors.windows(2) {
                let (wide, narrow) = (pair[0].slice_from(5, i, j), pair[1].slice_from(5, i, j));
                assert!(wide.data().iter().zip(narrow.data()).all(|(w, n)| w >= n));
            }
        }
    }
}
