//! Pooling and projection from hidden states into the shared K-space.
//!
//! Global features average the hidden states at the special-token
//! positions; local features average everything else that is not
//! padding (patch prefix included on the image branch). Each modality
//! owns one MLP head shared between its global and local paths, with
//! an opt-in ablation that gives the local paths separate heads. A
//! third head projects category-description features for the
//! knowledge bank.
//!
//! Projected rows are unit-normalized by default so the alignment
//! losses see pure directions; the raw dot-product variant stays
//! available behind the `normalize` switch and is recorded on every
//! bundle.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{BackboneSpec, HiddenStateView, ParamBinding, ParamStore, TapeHiddenView};

/// Default extraction depth: the layer just below the final one.
pub fn penultimate_layer(spec: &BackboneSpec) -> usize {
    spec.num_layers - 1
}

/// Mean of hidden states at the special-token positions. 1 x d.
pub fn pool_global(view: &HiddenStateView) -> Result<Matrix> {
    if view.special_positions.is_empty() {
        return Err(Error::config("cannot pool globals: no special positions"));
    }
    Ok(view.states.mean_rows(&view.special_positions))
}

/// Mean of hidden states at the ordinary positions. 1 x d.
pub fn pool_local(view: &HiddenStateView) -> Result<Matrix> {
    if view.ordinary_positions.is_empty() {
        return Err(Error::config(
            "cannot pool locals: sequence has only special tokens",
        ));
    }
    Ok(view.states.mean_rows(&view.ordinary_positions))
}

/// Shape metadata for one MLP head; weights live in the set's store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionHead {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Number of linear layers; GELU between consecutive layers.
    pub depth: usize,
}

pub const HEAD_IMG: &str = "img";
pub const HEAD_TXT: &str = "txt";
pub const HEAD_DIS: &str = "dis";
pub const HEAD_IMG_LOCAL: &str = "img_local";
pub const HEAD_TXT_LOCAL: &str = "txt_local";

/// The projection heads plus the normalization policy.
#[derive(Debug, Clone)]
pub struct ProjectionSet {
    pub params: ParamStore,
    heads: BTreeMap<String, ProjectionHead>,
    pub normalize: bool,
}

pub fn head_param(head: &str, layer: usize, part: &str) -> String {
    format!("proj.{head}.l{layer}.{part}")
}

impl ProjectionSet {
    /// Builds img/txt/dis heads (plus separate local heads when asked)
    /// with the given depth. Hidden widths equal `in_dim`.
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        depth: usize,
        normalize: bool,
        separate_local_heads: bool,
        seed: u64,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("projection depth must be at least 1"));
        }
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("projection dims must be positive"));
        }
        let mut set = ProjectionSet {
            params: ParamStore::new(),
            heads: BTreeMap::new(),
            normalize,
        };
        let mut names = vec![HEAD_IMG, HEAD_TXT, HEAD_DIS];
        if separate_local_heads {
            names.push(HEAD_IMG_LOCAL);
            names.push(HEAD_TXT_LOCAL);
        }
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for name in names {
            set.insert_head(name, in_dim, out_dim, depth, &mut rng);
        }
        Ok(set)
    }

    fn insert_head(
        &mut self,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        depth: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) {
        self.heads.insert(
            name.to_string(),
            ProjectionHead {
                in_dim,
                out_dim,
                depth,
            },
        );
        for l in 0..depth {
            let (din, dout) = layer_dims(in_dim, out_dim, depth, l);
            let std = 1.0 / (din as f64).sqrt();
            self.params
                .insert(head_param(name, l, "w"), Matrix::randn_from(rng, din, dout, std));
            self.params
                .insert(head_param(name, l, "b"), Matrix::zeros(1, dout));
        }
    }

    /// Single head that passes inputs through unchanged, for oracles.
    pub fn identity(dim: usize) -> Self {
        let mut set = ProjectionSet {
            params: ParamStore::new(),
            heads: BTreeMap::new(),
            normalize: false,
        };
        for name in [HEAD_IMG, HEAD_TXT, HEAD_DIS] {
            set.heads.insert(
                name.to_string(),
                ProjectionHead {
                    in_dim: dim,
                    out_dim: dim,
                    depth: 1,
                },
            );
            set.params
                .insert(head_param(name, 0, "w"), Matrix::identity(dim));
            set.params.insert(head_param(name, 0, "b"), Matrix::zeros(1, dim));
        }
        set
    }

    pub fn head(&self, name: &str) -> Result<&ProjectionHead> {
        self.heads
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown projection head '{name}'")))
    }

    pub fn head_names(&self) -> impl Iterator<Item = &str> {
        self.heads.keys().map(|s| s.as_str())
    }

    pub fn has_head(&self, name: &str) -> bool {
        self.heads.contains_key(name)
    }

    pub fn out_dim(&self) -> usize {
        self.heads.values().next().expect("no heads").out_dim
    }

    /// Head serving the local path of a modality.
    pub fn local_head_name(&self, modality_head: &str) -> String {
        let candidate = format!("{modality_head}_local");
        if self.heads.contains_key(&candidate) {
            candidate
        } else {
            modality_head.to_string()
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        self.params.bind(tape)
    }

    /// MLP forward without normalization. x is rows x in_dim.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        head: &str,
        x: VarId,
    ) -> Result<VarId> {
        let shape = self.head(head)?;
        if tape.value(x).cols() != shape.in_dim {
            return Err(Error::config(format!(
                "head '{head}' expects {} input columns, got {}",
                shape.in_dim,
                tape.value(x).cols()
            )));
        }
        let mut h = x;
        for l in 0..shape.depth {
            let w = binding.var(&head_param(head, l, "w"));
            let b = binding.var(&head_param(head, l, "b"));
            let lin = tape.matmul(h, w);
            h = tape.add_row(lin, b);
            if l + 1 < shape.depth {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    /// Head forward plus the set's normalization policy.
    pub fn project_on_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        head: &str,
        x: VarId,
    ) -> Result<VarId> {
        let raw = self.forward_on_tape(tape, binding, head, x)?;
        if !self.normalize {
            return Ok(raw);
        }
        let v = tape.value(raw);
        for r in 0..v.rows() {
            let norm = v.row_l2_norm(r);
            if !norm.is_finite() || norm < 1e-12 {
                return Err(Error::numeric(format!(
                    "head '{head}' produced a degenerate row (norm {norm}); cannot normalize"
                )));
            }
        }
        Ok(tape.l2_normalize_rows(raw))
    }

    /// Value-level projection of pooled rows.
    pub fn project(&self, head: &str, pooled: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let x = tape.constant(pooled.clone());
        let out = self.project_on_tape(&mut tape, &binding, head, x)?;
        Ok(tape.value(out).clone())
    }
}

/// Paired global/local features for both modalities, B x K each.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub x_g: Matrix,
    pub x_l: Matrix,
    pub y_g: Matrix,
    pub y_l: Matrix,
    pub normalized: bool,
}

impl FeatureBundle {
    pub fn batch_size(&self) -> usize {
        self.x_g.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (b, k) = self.x_g.shape();
        for (name, m) in [("x_l", &self.x_l), ("y_g", &self.y_g), ("y_l", &self.y_l)] {
            if m.shape() != (b, k) {
                return Err(Error::config(format!(
                    "bundle field {name} has shape {:?}, expected {:?}",
                    m.shape(),
                    (b, k)
                )));
            }
        }
        if self.normalized {
            for m in [&self.x_g, &self.x_l, &self.y_g, &self.y_l] {
                for r in 0..m.rows() {
                    let n = m.row_l2_norm(r);
                    if (n - 1.0).abs() > 1e-5 {
                        return Err(Error::numeric(format!(
                            "bundle marked normalized but a row norm is {n}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Bundle fields still on the tape.
pub struct TapeBundle {
    pub x_g: VarId,
    pub x_l: VarId,
    pub y_g: VarId,
    pub y_l: VarId,
}

fn pool_views_on_tape(
    tape: &mut Tape,
    views: &[TapeHiddenView],
    global: bool,
) -> Result<VarId> {
    let mut rows = Vec::with_capacity(views.len());
    for v in views {
        let positions = if global {
            &v.special_positions
        } else {
            &v.ordinary_positions
        };
        if positions.is_empty() {
            return Err(Error::config(if global {
                "cannot pool globals: no special positions"
            } else {
                "cannot pool locals: sequence has only special tokens"
            }));
        }
        rows.push(tape.mean_rows(v.states, positions.clone()));
    }
    Ok(tape.concat_rows(&rows))
}

/// Pools and projects per-sample hidden views into a bundle. Image and
/// text views must pair up one-to-one.
pub fn build_bundle_on_tape(
    tape: &mut Tape,
    set: &ProjectionSet,
    binding: &ParamBinding,
    image_views: &[TapeHiddenView],
    text_views: &[TapeHiddenView],
) -> Result<TapeBundle> {
    if image_views.is_empty() || image_views.len() != text_views.len() {
        return Err(Error::config(format!(
            "bundle needs matching non-empty batches, got {} images and {} texts",
            image_views.len(),
            text_views.len()
        )));
    }
    let img_g = pool_views_on_tape(tape, image_views, true)?;
    let img_l = pool_views_on_tape(tape, image_views, false)?;
    let txt_g = pool_views_on_tape(tape, text_views, true)?;
    let txt_l = pool_views_on_tape(tape, text_views, false)?;

    let img_local_head = set.local_head_name(HEAD_IMG);
    let txt_local_head = set.local_head_name(HEAD_TXT);
    Ok(TapeBundle {
        x_g: set.project_on_tape(tape, binding, HEAD_IMG, img_g)?,
        x_l: set.project_on_tape(tape, binding, &img_local_head, img_l)?,
        y_g: set.project_on_tape(tape, binding, HEAD_TXT, txt_g)?,
        y_l: set.project_on_tape(tape, binding, &txt_local_head, txt_l)?,
    })
}

/// Value-level bundle from already-computed hidden views.
pub fn build_bundle(
    set: &ProjectionSet,
    image_views: &[HiddenStateView],
    text_views: &[HiddenStateView],
) -> Result<FeatureBundle> {
    let mut tape = Tape::new();
    let binding = set.bind(&mut tape);
    let to_tape = |tape: &mut Tape, views: &[HiddenStateView]| -> Vec<TapeHiddenView> {
        views
            .iter()
            .map(|v| TapeHiddenView {
                states: tape.constant(v.states.clone()),
                special_positions: v.special_positions.clone(),
                ordinary_positions: v.ordinary_positions.clone(),
            })
            .collect()
    };
    let imgs = to_tape(&mut tape, image_views);
    let txts = to_tape(&mut tape, text_views);
    let bundle = build_bundle_on_tape(&mut tape, set, &binding, &imgs, &txts)?;
    Ok(FeatureBundle {
        x_g: tape.value(bundle.x_g).clone(),
        x_l: tape.value(bundle.x_l).clone(),
        y_g: tape.value(bundle.y_g).clone(),
        y_l: tape.value(bundle.y_l).clone(),
        normalized: set.normalize,
    })
}

fn layer_dims(in_dim: usize, out_dim: usize, depth: usize, layer: usize) -> (usize, usize) {
    let din = if layer == 0 { in_dim } else { in_dim.max(1) };
    let dout = if layer + 1 == depth { out_dim } else { in_dim.max(1) };
    (din, dout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, fd_step, GradCheckReport};

    fn view(states: Matrix, special: Vec<usize>, ordinary: Vec<usize>) -> HiddenStateView {
        HiddenStateView {
            layer_index: 1,
            states,
            special_positions: special,
            ordinary_positions: ordinary,
        }
    }

    #[test]
    fn pool_global_averages_special_rows() {
        let states = Matrix::from_rows(&[vec![9.0, 9.0], vec![1.0, 3.0], vec![3.0, 1.0]]);
        let v = view(states, vec![1, 2], vec![0]);
        let pooled = pool_global(&v).unwrap();
        assert_eq!(pooled.row(0), &[2.0, 2.0]);
    }

    #[test]
    fn pooling_ignores_positions_outside_both_sets() {
        // a padded row (position 3) belongs to neither set
        let states = Matrix::from_rows(&[
            vec![1.0, 1.0],
            vec![5.0, 7.0],
            vec![7.0, 5.0],
            vec![1e6, 1e6],
        ]);
        let with_pad = view(states.clone(), vec![1, 2], vec![0]);
        let pooled = pool_global(&with_pad).unwrap();
        assert_eq!(pooled.row(0), &[6.0, 6.0]);
        assert_eq!(pool_local(&with_pad).unwrap().row(0), &[1.0, 1.0]);
    }

    #[test]
    fn pool_errors_on_empty_position_sets() {
        let states = Matrix::ones(2, 2);
        assert!(pool_global(&view(states.clone(), vec![], vec![0, 1])).is_err());
        assert!(pool_local(&view(states, vec![0, 1], vec![])).is_err());
    }

    #[test]
    fn identity_head_passes_input_through() {
        let set = ProjectionSet::identity(3);
        let x = Matrix::from_rows(&[vec![0.3, -1.2, 4.0]]);
        let out = set.project(HEAD_IMG, &x).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn normalized_projection_rows_are_unit_norm() {
        let set = ProjectionSet::new(6, 4, 2, true, false, 3).unwrap();
        let x = Matrix::randn(5, 6, 1.0, 9);
        let out = set.project(HEAD_TXT, &x).unwrap();
        for r in 0..out.rows() {
            assert!((out.row_l2_norm(r) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let set = ProjectionSet::new(4, 3, 2, true, false, 5).unwrap();
        let x0 = Matrix::randn(2, 4, 1.0, 6);

        let eval = |set: &ProjectionSet, x: &Matrix| -> f64 {
            let mut tape = Tape::new();
            let binding = set.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let out = set.project_on_tape(&mut tape, &binding, HEAD_IMG, xv).unwrap();
            let sq = tape.mul(out, out);
            let s = tape.sum_all(sq);
            tape.scalar(s)
        };

        // analytic grads w.r.t. input and every head parameter
        let mut tape = Tape::new();
        let binding = set.bind(&mut tape);
        let xv = tape.leaf(x0.clone());
        let out = set.project_on_tape(&mut tape, &binding, HEAD_IMG, xv).unwrap();
        let sq = tape.mul(out, out);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);

        let mut report = GradCheckReport::default();
        let gx = grads.wrt(xv).unwrap();
        for k in 0..x0.len() {
            let v0 = x0.as_slice()[k];
            let fd = central_difference(
                |v| {
                    let mut probe = x0.clone();
                    probe.as_mut_slice()[k] = v;
                    eval(&set, &probe)
                },
                v0,
                fd_step(v0),
            );
            report.record(&format!("x[{k}]"), gx.as_slice()[k], fd);
        }
        for (name, base) in set.params.iter() {
            if !name.starts_with("proj.img.") {
                continue;
            }
            let analytic = grads.wrt(binding.var(name)).unwrap().clone();
            for k in 0..base.len() {
                let v0 = base.as_slice()[k];
                let fd = central_difference(
                    |v| {
                        let mut probe = set.clone();
                        probe.params.get_mut(name).as_mut_slice()[k] = v;
                        eval(&probe, &x0)
                    },
                    v0,
                    fd_step(v0),
                );
                report.record(&format!("{name}[{k}]"), analytic.as_slice()[k], fd);
            }
        }
        report.assert_below(1e-4);
    }

    #[test]
    fn bundle_rows_match_per_sample_projection() {
        let d = 5;
        let set = ProjectionSet::new(d, 3, 2, true, false, 7).unwrap();
        let mk = |seed| {
            view(
                Matrix::randn(6, d, 1.0, seed),
                vec![4, 5],
                vec![0, 1, 2, 3],
            )
        };
        let imgs: Vec<_> = (0..3).map(|i| mk(100 + i)).collect();
        let txts: Vec<_> = (0..3).map(|i| mk(200 + i)).collect();
        let bundle = build_bundle(&set, &imgs, &txts).unwrap();
        bundle.validate().unwrap();

        for i in 0..3 {
            let g = pool_global(&imgs[i]).unwrap();
            let single = set.project(HEAD_IMG, &g).unwrap();
            for c in 0..3 {
                assert!((bundle.x_g.get(i, c) - single.get(0, c)).abs() < 1e-12);
            }
            let l = pool_local(&txts[i]).unwrap();
            let single = set.project(HEAD_TXT, &l).unwrap();
            for c in 0..3 {
                assert!((bundle.y_l.get(i, c) - single.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn separate_local_heads_change_only_local_rows() {
        let d = 4;
        let shared = ProjectionSet::new(d, 3, 2, false, false, 11).unwrap();
        let mut split = ProjectionSet::new(d, 3, 2, false, true, 11).unwrap();
        // make the split set's shared heads equal to the shared set's
        for (name, m) in shared.params.iter() {
            *split.params.get_mut(name) = m.clone();
        }
        let imgs = vec![view(Matrix::randn(5, d, 1.0, 1), vec![3, 4], vec![0, 1, 2])];
        let txts = vec![view(Matrix::randn(5, d, 1.0, 2), vec![3, 4], vec![0, 1, 2])];
        let a = build_bundle(&shared, &imgs, &txts).unwrap();
        let b = build_bundle(&split, &imgs, &txts).unwrap();
        assert_eq!(a.x_g, b.x_g);
        assert_eq!(a.y_g, b.y_g);
        assert_ne!(a.x_l, b.x_l);
        assert_ne!(a.y_l, b.y_l);
    }

    #[test]
    fn bundle_size_mismatch_is_rejected() {
        let set = ProjectionSet::identity(2);
        let v = view(Matrix::ones(2, 2), vec![1], vec![0]);
        assert!(build_bundle(&set, &[v.clone()], &[v.clone(), v.clone()]).is_err());
        assert!(build_bundle(&set, &[], &[]).is_err());
    }
}
