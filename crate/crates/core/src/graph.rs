//! User–item bipartite graph, its rescaled normalized Laplacian, and
//! Chebyshev polynomial propagation.
//!
//! Node order is users first, then items: user `u` is node `u` and item
//! index `i` is node `num_users + i`. Item indices here are 0-based; the
//! dataset's dense item ids (which reserve 0 for padding) are shifted down by
//! one before reaching this module.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::optim::ParameterStore;
use crate::sparse::CsrMatrix;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteGraph {
    pub num_users: usize,
    pub num_items: usize,
    /// Sorted, deduplicated `(user, item)` pairs.
    pub edges: Vec<(usize, usize)>,
    pub adjacency: CsrMatrix,
}

impl BipartiteGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency.indptr()[node + 1] - self.adjacency.indptr()[node]
    }
}

pub fn build_bipartite(edges: &[(usize, usize)], num_users: usize, num_items: usize) -> Result<BipartiteGraph> {
    let mut unique = BTreeSet::new();
    for &(u, i) in edges {
        if u >= num_users || i >= num_items {
            return Err(Error::IndexOutOfRange(format!(
                "edge (user {u}, item {i}) outside {num_users} users x {num_items} items"
            )));
        }
        unique.insert((u, i));
    }
    let edges: Vec<(usize, usize)> = unique.into_iter().collect();
    let n = num_users + num_items;
    let mut triplets = Vec::with_capacity(edges.len() * 2);
    for &(u, i) in &edges {
        triplets.push((u, num_users + i, 1.0));
        triplets.push((num_users + i, u, 1.0));
    }
    Ok(BipartiteGraph {
        num_users,
        num_items,
        edges,
        adjacency: CsrMatrix::from_triplets(n, n, triplets)?,
    })
}

/// `L − I = −D^{−1/2} A D^{−1/2}`, spectrum inside `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledLaplacian {
    pub matrix: Rc<CsrMatrix>,
    pub num_edges: usize,
}

impl ScaledLaplacian {
    pub fn num_nodes(&self) -> usize {
        self.matrix.n_rows()
    }
}

pub fn scaled_laplacian(g: &BipartiteGraph) -> ScaledLaplacian {
    let dinv: Vec<f64> = (0..g.num_nodes())
        .map(|v| match g.degree(v) {
            0 => 0.0,
            d => 1.0 / (d as f64).sqrt(),
        })
        .collect();
    ScaledLaplacian {
        matrix: Rc::new(g.adjacency.map_values(|r, c, a| -a * dinv[r] * dinv[c])),
        num_edges: g.num_edges(),
    }
}

/// Filter matrices `Θ_k^(l)`, indexed `[layer][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChebyLayerParams {
    pub thetas: Vec<Vec<Tensor>>,
}

impl ChebyLayerParams {
    pub fn new(thetas: Vec<Vec<Tensor>>) -> Result<Self> {
        let order = thetas.first().map_or(0, Vec::len);
        let d = thetas.first().and_then(|l| l.first()).map_or(0, Tensor::rows);
        for layer in &thetas {
            if layer.len() != order || order == 0 {
                return Err(Error::InvalidArgument("every layer needs the same K+1 >= 1 filters".into()));
            }
            if let Some(t) = layer.iter().find(|t| t.shape() != [d, d]) {
                return Err(Error::ShapeMismatch {
                    op: "cheby_params",
                    lhs: vec![d, d],
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { thetas })
    }

    pub fn num_layers(&self) -> usize {
        self.thetas.len()
    }

    /// Polynomial order `K`.
    pub fn order(&self) -> usize {
        self.thetas.first().map_or(0, |l| l.len() - 1)
    }

    /// Reads `L_g × (K+1)` matrices named by [`theta_name`] from a store.
    pub fn from_store(store: &ParameterStore, prefix: &str, layers: usize, k: usize) -> Result<Self> {
        let thetas = (1..=layers)
            .map(|l| (0..=k).map(|j| store.require(&theta_name(prefix, l, j)).cloned()).collect())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { thetas })
    }
}

/// Store name of `Θ_k` in layer `layer` (1-based).
pub fn theta_name(prefix: &str, layer: usize, k: usize) -> String {
    format!("{prefix}.l{layer}.k{k}")
}

/// Registers Xavier-initialized `Θ` matrices for `layers` layers of order `k`.
pub fn init_cheby_params(store: &mut ParameterStore, prefix: &str, layers: usize, k: usize, d: usize) -> Result<()> {
    for l in 1..=layers {
        for j in 0..=k {
            store.init_xavier(&theta_name(prefix, l, j), d, d)?;
        }
    }
    Ok(())
}

/// `Σ_k T_k(L̃) H Θ_k` via the three-term recurrence.
pub fn cheby_layer_on_tape(tape: &mut Tape, lap: &Rc<CsrMatrix>, h: Var, thetas: &[Var]) -> Result<Var> {
    let Some((&theta0, rest)) = thetas.split_first() else {
        return Err(Error::InvalidArgument("chebyshev layer needs at least Θ_0".into()));
    };
    let mut terms = vec![tape.matmul(h, theta0)?];
    let mut prev = h;
    let mut cur = h;
    for (k, &theta) in rest.iter().enumerate() {
        let next = if k == 0 {
            tape.spmm(lap.clone(), h)?
        } else {
            let lt = tape.spmm(lap.clone(), cur)?;
            let lt2 = tape.scale(lt, 2.0);
            tape.sub(lt2, prev)?
        };
        terms.push(tape.matmul(next, theta)?);
        prev = cur;
        cur = next;
    }
    tape.add_n(&terms)
}

/// Chains `layers.len()` Chebyshev layers; no layers returns `h0`.
pub fn propagate_on_tape(tape: &mut Tape, lap: &Rc<CsrMatrix>, h0: Var, layers: &[Vec<Var>], relu: bool) -> Result<Var> {
    let mut h = h0;
    for (l, thetas) in layers.iter().enumerate() {
        h = cheby_layer_on_tape(tape, lap, h, thetas)?;
        if relu && l + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

pub fn cheby_layer(lap: &ScaledLaplacian, h: &Tensor, thetas: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let tv: Vec<Var> = thetas.iter().map(|t| tape.constant(t.clone())).collect();
    let out = cheby_layer_on_tape(&mut tape, &lap.matrix, hv, &tv)?;
    Ok(tape.value(out).clone())
}

pub fn propagate(lap: &ScaledLaplacian, h0: &Tensor, params: &ChebyLayerParams, relu: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let hv = tape.constant(h0.clone());
    let layers: Vec<Vec<Var>> = params
        .thetas
        .iter()
        .map(|l| l.iter().map(|t| tape.constant(t.clone())).collect())
        .collect();
    let out = propagate_on_tape(&mut tape, &lap.matrix, hv, &layers, relu)?;
    Ok(tape.value(out).clone())
}

/// Splits node features into the user block and the item block.
pub fn split_rows(h: &Tensor, num_users: usize) -> Result<(Tensor, Tensor)> {
    if h.rank() != 2 || num_users > h.rows() {
        return Err(Error::ShapeMismatch {
            op: "split_rows",
            lhs: h.shape().to_vec(),
            rhs: vec![num_users],
        });
    }
    let d = h.cols();
    let (u, i) = h.data().split_at(num_users * d);
    Ok((
        Tensor::matrix(num_users, d, u.to_vec())?,
        Tensor::matrix(h.rows() - num_users, d, i.to_vec())?,
    ))
}

const CACHE_MAGIC: &[u8] = b"WPGGRAPH1\n";

pub fn encode_cache(lap: &ScaledLaplacian) -> Vec<u8> {
    let m = &lap.matrix;
    let mut out = CACHE_MAGIC.to_vec();
    out.extend_from_slice(&(m.n_rows() as u64).to_le_bytes());
    out.extend_from_slice(&(lap.num_edges as u64).to_le_bytes());
    for &p in m.indptr() {
        out.extend_from_slice(&(p as u64).to_le_bytes());
    }
    for &c in m.indices() {
        out.extend_from_slice(&(c as u64).to_le_bytes());
    }
    for &v in m.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cache(bytes: &[u8]) -> Result<ScaledLaplacian> {
    let body = bytes
        .strip_prefix(CACHE_MAGIC)
        .ok_or_else(|| Error::Format("graph cache: bad magic".into()))?;
    let mut words = body.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).unwrap());
    if body.len() % 8 != 0 {
        return Err(Error::Format("graph cache: truncated".into()));
    }
    let mut next = || words.next().ok_or_else(|| Error::Format("graph cache: truncated".into()));
    let n = u64::from_le_bytes(next()?) as usize;
    let num_edges = u64::from_le_bytes(next()?) as usize;
    let indptr = (0..=n).map(|_| next().map(|w| u64::from_le_bytes(w) as usize)).collect::<Result<Vec<_>>>()?;
    let nnz = *indptr.last().unwrap_or(&0);
    let indices = (0..nnz).map(|_| next().map(|w| u64::from_le_bytes(w) as usize)).collect::<Result<Vec<_>>>()?;
    let values = (0..nnz).map(|_| next().map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
    if next().is_ok() {
        return Err(Error::Format("graph cache: trailing bytes".into()));
    }
    let matrix = CsrMatrix::new(n, n, indptr, indices, values).map_err(|e| Error::Format(format!("graph cache: {e}")))?;
    Ok(ScaledLaplacian {
        matrix: Rc::new(matrix),
        num_edges,
    })
}

pub fn save_cache(path: &Path, lap: &ScaledLaplacian) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_cache(lap)).map_err(|e| Error::io(path, e))
}

pub fn load_cache(path: &Path) -> Result<ScaledLaplacian> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_graph() {
        let g = build_bipartite(&[(0, 0)], 1, 1).unwrap();
        assert_eq!(g.adjacency.to_dense().data(), &[0.0, 1.0, 1.0, 0.0]);
        let lap = scaled_laplacian(&g);
        assert_eq!(lap.matrix.to_dense().data(), &[0.0, -1.0, -1.0, 0.0]);
    }

    #[test]
    fn duplicates_collapse_and_ranges_are_checked() {
        let g = build_bipartite(&[(0, 5), (0, 5)], 1, 6).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.adjacency.get(0, 6), 1.0);
        assert_eq!(g.adjacency.nnz(), 2);
        let err = build_bipartite(&[(0, 1), (2, 0)], 2, 2).unwrap_err().to_string();
        assert!(err.contains("user 2, item 0"), "{err}");
    }

    #[test]
    fn isolated_node_has_empty_row() {
        let g = build_bipartite(&[(0, 0)], 2, 1).unwrap();
        let lap = scaled_laplacian(&g);
        assert_eq!(lap.matrix.row(1).count(), 0);
        assert!((0..3).all(|r| lap.matrix.get(r, 1) == 0.0));
    }

    #[test]
    fn low_orders() {
        let g = build_bipartite(&[(0, 0), (0, 1), (1, 1)], 2, 2).unwrap();
        let lap = scaled_laplacian(&g);
        let h = Tensor::matrix(4, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0, 2.0, -2.0]).unwrap();
        let theta0 = Tensor::from_rows(&[vec![0.5, 1.0], vec![-1.0, 2.0]]).unwrap();
        let k0 = cheby_layer(&lap, &h, &[theta0.clone()]).unwrap();
        assert_eq!(k0, h.matmul(&theta0).unwrap());
        let id = Tensor::identity(2);
        let k1 = cheby_layer(&lap, &h, &[id.clone(), id]).unwrap();
        let expected = h.add(&lap.matrix.spmm(&h).unwrap()).unwrap();
        assert!(k1.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn zero_layers_is_identity() {
        let g = build_bipartite(&[(0, 0)], 1, 1).unwrap();
        let lap = scaled_laplacian(&g);
        let h = Tensor::matrix(2, 1, vec![3.0, -4.0]).unwrap();
        assert_eq!(propagate(&lap, &h, &ChebyLayerParams { thetas: vec![] }, false).unwrap(), h);
    }

    #[test]
    fn split_rows_partitions() {
        let h = Tensor::matrix(3, 2, vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let (u, i) = split_rows(&h, 1).unwrap();
        assert_eq!(u.data(), &[0., 1.]);
        assert_eq!(i.data(), &[2., 3., 4., 5.]);
        let mut joined = u.data().to_vec();
        joined.extend_from_slice(i.data());
        assert_eq!(joined, h.data());
    }

    #[test]
    fn cache_roundtrip() {
        let g = build_bipartite(&[(0, 1), (1, 0), (1, 2)], 3, 3).unwrap();
        let lap = scaled_laplacian(&g);
        let bytes = encode_cache(&lap);
        assert!(bytes.starts_with(b"WPGGRAPH1\n"));
        assert_eq!(decode_cache(&bytes).unwrap(), lap);
        assert!(decode_cache(&bytes[..bytes.len() - 8]).is_err());
    }
}
