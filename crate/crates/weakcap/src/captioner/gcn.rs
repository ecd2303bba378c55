//! One-round message passing over a dependency tree, producing one
//! relation-aware feature per edge plus a self-feature for the root.

use super::GcnParams;
use crate::corpusio::ConceptVocabulary;
use crate::num::{axpy, relu};
use crate::treespan::DependencyTree;
use crate::{Error, Real, Result};

/// Forward pass artifacts: the relation-aware features plus every
/// intermediate needed by [`encode_tree_backward`].
#[derive(Debug, Clone)]
pub struct TreeEncoding {
    /// `features[0]` is the root self-feature `[root; zeros; root]`; entry
    /// `i + 1` belongs to edge `i` as `[head; relation embedding; tail]`,
    /// where head/tail are the post-update node vectors.
    pub features: Vec<Vec<Real>>,
    node_emb: Vec<Vec<Real>>,
    rel_emb: Vec<Vec<Real>>,
    pre: Vec<Vec<Real>>,
}

impl TreeEncoding {
    /// Width of one relation-aware feature.
    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }
}

fn canonical_edge_order(tree: &DependencyTree) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tree.edges.len()).collect();
    order.sort_by(|&i, &j| {
        let a = &tree.edges[i];
        let b = &tree.edges[j];
        (a.0, &a.1, a.2).cmp(&(b.0, &b.1, b.2))
    });
    order
}

fn check_dims(tree: &DependencyTree, vocab: &ConceptVocabulary, params: &GcnParams) -> Result<()> {
    if !vocab.has_embeddings() {
        return Err(Error::Vocab("vocabulary has no embeddings attached".into()));
    }
    if vocab.embeddings.dim != params.dim() {
        return Err(Error::Shape(format!(
            "embedding width {} does not match encoder width {}",
            vocab.embeddings.dim,
            params.dim()
        )));
    }
    tree.validate()
}

/// Runs one message-passing round and assembles the relation-aware features,
/// keeping the intermediates for the backward pass.
pub fn encode_tree(
    tree: &DependencyTree,
    vocab: &ConceptVocabulary,
    params: &GcnParams,
) -> Result<TreeEncoding> {
    check_dims(tree, vocab, params)?;
    let dim = params.dim();

    let node_emb: Vec<Vec<Real>> =
        tree.nodes.iter().map(|p| vocab.phrase_embedding(p)).collect();
    let rel_emb: Vec<Vec<Real>> =
        tree.edges.iter().map(|(_, r, _)| vocab.relation_embedding(r)).collect();

    // Every node: role-mapped self embedding plus bias.
    let mut pre: Vec<Vec<Real>> = node_emb
        .iter()
        .map(|e| {
            let mut v = params.w_self.matvec(e);
            axpy(&mut v, 1.0, &params.bias.data);
            v
        })
        .collect();
    // Every edge: the child hears the role-mapped parent, the parent hears the
    // role-mapped child, and both hear the role-mapped relation embedding.
    // Messages accumulate in canonical (sorted-edge) order so features do not
    // depend on how the edge list happens to be stored.
    for &i in &canonical_edge_order(tree) {
        let (parent, _, child) = &tree.edges[i];
        let from_parent = params.w_parent.matvec(&node_emb[*parent]);
        axpy(&mut pre[*child], 1.0, &from_parent);
        let from_child = params.w_child.matvec(&node_emb[*child]);
        axpy(&mut pre[*parent], 1.0, &from_child);
        let from_rel = params.w_rel.matvec(&rel_emb[i]);
        axpy(&mut pre[*child], 1.0, &from_rel);
        axpy(&mut pre[*parent], 1.0, &from_rel);
    }
    let upd: Vec<Vec<Real>> =
        pre.iter().map(|v| v.iter().map(|&x| relu(x)).collect()).collect();

    // The root always sits at node index zero.
    let mut features = Vec::with_capacity(tree.edges.len() + 1);
    let mut root_feature = Vec::with_capacity(3 * dim);
    root_feature.extend_from_slice(&upd[0]);
    root_feature.extend(std::iter::repeat(0.0).take(dim));
    root_feature.extend_from_slice(&upd[0]);
    features.push(root_feature);
    for ((parent, _, child), e_r) in tree.edges.iter().zip(&rel_emb) {
        let mut f = Vec::with_capacity(3 * dim);
        f.extend_from_slice(&upd[*parent]);
        f.extend_from_slice(e_r);
        f.extend_from_slice(&upd[*child]);
        features.push(f);
    }
    Ok(TreeEncoding { features, node_emb, rel_emb, pre })
}

/// The relation-aware features alone (forward pass without training caches).
pub fn relation_features(
    tree: &DependencyTree,
    vocab: &ConceptVocabulary,
    params: &GcnParams,
) -> Result<Vec<Vec<Real>>> {
    Ok(encode_tree(tree, vocab, params)?.features)
}

/// Accumulates parameter gradients given the loss gradient with respect to
/// every relation-aware feature. Embeddings are fixed inputs, so the relation
/// slot of each feature carries no trainable gradient.
pub fn encode_tree_backward(
    tree: &DependencyTree,
    encoding: &TreeEncoding,
    d_features: &[Vec<Real>],
    params: &GcnParams,
    grads: &mut GcnParams,
) -> Result<()> {
    let dim = params.dim();
    if d_features.len() != encoding.features.len() {
        return Err(Error::Shape(format!(
            "{} feature gradients for {} features",
            d_features.len(),
            encoding.features.len()
        )));
    }
    for d in d_features {
        if d.len() != 3 * dim {
            return Err(Error::Shape(format!(
                "feature gradient width {} does not match {}",
                d.len(),
                3 * dim
            )));
        }
    }

    // Gather gradients on the post-update node vectors from every feature
    // slot the node occupies.
    let mut d_upd = vec![vec![0.0; dim]; tree.nodes.len()];
    axpy(&mut d_upd[0], 1.0, &d_features[0][..dim]);
    axpy(&mut d_upd[0], 1.0, &d_features[0][2 * dim..]);
    for ((parent, _, child), d) in tree.edges.iter().zip(&d_features[1..]) {
        axpy(&mut d_upd[*parent], 1.0, &d[..dim]);
        axpy(&mut d_upd[*child], 1.0, &d[2 * dim..]);
    }

    // Through the rectifier.
    let d_pre: Vec<Vec<Real>> = d_upd
        .iter()
        .zip(&encoding.pre)
        .map(|(d, pre)| {
            d.iter().zip(pre).map(|(&g, &p)| if p > 0.0 { g } else { 0.0 }).collect()
        })
        .collect();

    for (n, dp) in d_pre.iter().enumerate() {
        grads.w_self.add_outer(dp, &encoding.node_emb[n]);
        axpy(&mut grads.bias.data, 1.0, dp);
    }
    for (i, (parent, _, child)) in tree.edges.iter().enumerate() {
        grads.w_parent.add_outer(&d_pre[*child], &encoding.node_emb[*parent]);
        grads.w_child.add_outer(&d_pre[*parent], &encoding.node_emb[*child]);
        let mut both = d_pre[*child].clone();
        axpy(&mut both, 1.0, &d_pre[*parent]);
        grads.w_rel.add_outer(&both, &encoding.rel_emb[i]);
    }
    Ok(())
}
