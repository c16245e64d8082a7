use super::{retrieve_rois, GmicConfig, SaliencyMaps};
use crate::error::{Error, Result};
use crate::imaging::ProcessedImage;
use crate::tensor::{Graph, NodeId, ParamStore};

/// BCE probability clamp.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct GlobalNodes {
    /// Feature maps `[n, h, w]`.
    pub features: NodeId,
    /// Sigmoid saliency `[windows, h, w]`.
    pub saliency: NodeId,
    /// Top-r pooled saliency `[windows]`.
    pub y_global: NodeId,
}

#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub global: GlobalNodes,
    pub z: NodeId,
    pub attention: NodeId,
    pub y_local: NodeId,
    pub y_fusion: NodeId,
    pub positions: Vec<(usize, usize)>,
    pub patches: Vec<ProcessedImage>,
}

fn conv_stack(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    mut x: NodeId,
    stages: usize,
    pool_after: impl Fn(usize, usize) -> bool,
) -> Result<NodeId> {
    for i in 0..stages {
        let w = g.param(store, &format!("{prefix}.conv{i}.weight"))?;
        let b = g.param(store, &format!("{prefix}.conv{i}.bias"))?;
        let c = g.conv2d(x, w, b, 1, 1)?;
        x = g.relu(c);
        if pool_after(i, g.shape(x)[1]) {
            x = g.max_pool2d(x, 2, 2)?;
        }
    }
    Ok(x)
}

/// Global network on an image node `[1, H, W]`.
pub fn global_forward(g: &mut Graph, store: &ParamStore, cfg: &GmicConfig, img: NodeId) -> Result<GlobalNodes> {
    let shape = g.shape(img).to_vec();
    if shape != [1, cfg.input_side, cfg.input_side] {
        return Err(Error::shape(
            g.node_label(img),
            format!("expected image [1, {0}, {0}], got {shape:?}", cfg.input_side),
        ));
    }
    let pools = cfg.pool_stages();
    let features = conv_stack(g, store, "global", img, cfg.global_channels.len(), |i, _| i < pools)?;
    let w = g.param(store, "global.saliency.weight")?;
    let b = g.param(store, "global.saliency.bias")?;
    let logits = g.conv2d(features, w, b, 1, 0)?;
    let saliency = g.sigmoid(logits);
    let y_global = g.top_r_mean(saliency, cfg.pool_fraction)?;
    Ok(GlobalNodes {
        features,
        saliency,
        y_global,
    })
}

/// Local network plus gated attention over patch nodes `[1, p, p]`.
/// Returns `(z, alpha)` with `z: [n_l]` and `alpha: [K]`.
pub fn local_attention(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &GmicConfig,
    patches: &[NodeId],
) -> Result<(NodeId, NodeId)> {
    if patches.is_empty() {
        return Err(Error::invalid("local module needs at least one patch"));
    }
    let stages = cfg.local_channels.len();
    let nl = cfg.local_features();
    let mut rows = Vec::with_capacity(patches.len());
    for &p in patches {
        let expected = [1, cfg.patch_side, cfg.patch_side];
        if g.shape(p) != expected {
            return Err(Error::shape(
                g.node_label(p),
                format!("expected patch {expected:?}, got {:?}", g.shape(p)),
            ));
        }
        let fmap = conv_stack(g, store, "local", p, stages, |i, side| i + 1 < stages && side >= 4)?;
        let spatial: usize = g.shape(fmap)[1..].iter().product();
        let flat = g.reshape(fmap, vec![nl, spatial])?;
        let pooled = g.mean(flat, 1)?;
        rows.push(g.reshape(pooled, vec![1, nl])?);
    }
    let k = rows.len();
    let h = g.concat(&rows, 0)?;
    let v = g.param(store, "attention.v")?;
    let u = g.param(store, "attention.u")?;
    let w = g.param(store, "attention.w")?;
    let hv = g.matmul(h, v)?;
    let tanh = g.tanh(hv);
    let hu = g.matmul(h, u)?;
    let gate = g.sigmoid(hu);
    let gated = g.mul(tanh, gate)?;
    let scores = g.matmul(gated, w)?;
    let scores = g.reshape(scores, vec![k])?;
    let alpha = g.softmax(scores, 0)?;
    let alpha_row = g.reshape(alpha, vec![1, k])?;
    let z = g.matmul(alpha_row, h)?;
    let z = g.reshape(z, vec![nl])?;
    Ok((z, alpha))
}

/// Global max pool of the feature maps concatenated with `z`, then affine + sigmoid.
pub fn fusion_forward(g: &mut Graph, store: &ParamStore, features: NodeId, z: NodeId) -> Result<NodeId> {
    let pooled = g.global_max_pool(features)?;
    let joined = g.concat(&[pooled, z], 0)?;
    let w = g.param(store, "fusion.weight")?;
    let b = g.param(store, "fusion.bias")?;
    let logits = g.affine(joined, w, b)?;
    Ok(g.sigmoid(logits))
}

/// Records the complete forward pass for one image. ROI positions are read off
/// the evaluated saliency maps, so no gradient flows through the crop choice.
pub fn build_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &GmicConfig,
    img: &ProcessedImage,
) -> Result<ForwardNodes> {
    cfg.validate()?;
    let x = g.input("image", img.to_tensor())?;
    let global = global_forward(g, store, cfg, x)?;
    let maps = SaliencyMaps::new(
        cfg.num_windows,
        cfg.saliency_side,
        g.value(global.saliency).data().to_vec(),
    )?;
    let (positions, patches) = retrieve_rois(&maps, img, cfg)?;
    let patch_nodes = patches
        .iter()
        .enumerate()
        .map(|(k, p)| g.input(&format!("patch{k}"), p.to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    let (z, attention) = local_attention(g, store, cfg, &patch_nodes)?;
    let w = g.param(store, "local.head.weight")?;
    let b = g.param(store, "local.head.bias")?;
    let local_logits = g.affine(z, w, b)?;
    let y_local = g.sigmoid(local_logits);
    let y_fusion = fusion_forward(g, store, global.features, z)?;
    g.set_output("saliency", global.saliency);
    g.set_output("y_global", global.y_global);
    g.set_output("y_local", y_local);
    g.set_output("y_fusion", y_fusion);
    g.set_output("attention", attention);
    Ok(ForwardNodes {
        global,
        z,
        attention,
        y_local,
        y_fusion,
        positions,
        patches,
    })
}

/// Multi-label loss averaged over windows: three BCE terms per window plus
/// `beta` times the L1 norm of that window's saliency map.
pub fn gmic_loss(g: &mut Graph, nodes: &ForwardNodes, labels: &[f64], beta: f64) -> Result<NodeId> {
    let t = g.shape(nodes.y_fusion)[0];
    if labels.len() != t {
        return Err(Error::invalid(format!("expected {t} labels, got {}", labels.len())));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid(format!("labels must be 0 or 1, got {labels:?}")));
    }
    let mut terms = Vec::with_capacity(4);
    for head in [nodes.global.y_global, nodes.y_local, nodes.y_fusion] {
        let bce = g.bce(head, labels, PROB_EPS)?;
        terms.push(g.sum(bce));
    }
    if beta != 0.0 {
        let abs = g.abs(nodes.global.saliency);
        let l1 = g.sum(abs);
        terms.push(g.scale_shift(l1, beta, 0.0));
    }
    let total = g.add_all(&terms)?;
    Ok(g.scale_shift(total, 1.0 / t as f64, 0.0))
}
