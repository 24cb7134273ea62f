use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tensor::{with_grad_mode, Tensor};

/// Order in which a node's operands are visited while building the
/// topological schedule. Gradients do not depend on it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Schedule {
    #[default]
    Default,
    /// Operand visitation order shuffled by the given seed.
    Shuffled(u64),
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        self.map.get(&leaf.id())
    }

    /// Gradient for `leaf`, or zeros of its shape when the root does not
    /// depend on it.
    pub fn get_or_zeros(&self, leaf: &Tensor) -> Tensor {
        self.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

struct Plan {
    /// Post-order: operands before the tensors they produce.
    order: Vec<Tensor>,
    relevant: HashSet<u64>,
}

/// Topological schedule of the graph under `root`, keeping only tensors
/// lying on a path from a target to the root.
fn plan(root: &Tensor, is_target: &dyn Fn(&Tensor) -> bool, schedule: Schedule) -> Plan {
    let mut rng = match schedule {
        Schedule::Default => None,
        Schedule::Shuffled(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let mut order = Vec::new();
    let mut relevant = HashSet::new();
    let mut visited = HashSet::new();
    // (tensor, operand visitation order, next position)
    let mut stack: Vec<(Tensor, Vec<usize>, usize)> = Vec::new();

    let children = |t: &Tensor, rng: &mut Option<ChaCha8Rng>| -> Vec<usize> {
        let n = t.node().map_or(0, |node| node.inputs.len());
        let mut idx: Vec<usize> = (0..n).collect();
        if let Some(r) = rng.as_mut() {
            idx.shuffle(r);
        }
        idx
    };

    if !root.requires_grad() {
        return Plan { order, relevant };
    }
    visited.insert(root.id());
    let kids = children(root, &mut rng);
    stack.push((root.clone(), kids, 0));
    while let Some((t, kids, pos)) = stack.last_mut() {
        if *pos < kids.len() {
            let child = t.node().expect("only graph nodes have operands").inputs[kids[*pos]].clone();
            *pos += 1;
            if child.requires_grad() && visited.insert(child.id()) {
                let kids = children(&child, &mut rng);
                stack.push((child, kids, 0));
            }
            continue;
        }
        let t = t.clone();
        stack.pop();
        let on_path = is_target(&t)
            || t.node()
                .is_some_and(|node| node.inputs.iter().any(|i| relevant.contains(&i.id())));
        if on_path {
            relevant.insert(t.id());
        }
        order.push(t);
    }
    Plan { order, relevant }
}

fn accumulate(grads: &mut HashMap<u64, Tensor>, id: u64, g: Tensor) -> Result<()> {
    let merged = match grads.remove(&id) {
        Some(prev) => prev.add(&g)?,
        None => g,
    };
    grads.insert(id, merged);
    Ok(())
}

fn propagate(root: &Tensor, plan: &Plan, create_graph: bool) -> Result<HashMap<u64, Tensor>> {
    let mut grads = HashMap::new();
    if !plan.relevant.contains(&root.id()) {
        return Ok(grads);
    }
    with_grad_mode(create_graph, || {
        grads.insert(root.id(), Tensor::ones(root.shape()));
        for t in plan.order.iter().rev() {
            let Some(node) = t.node() else { continue };
            if !plan.relevant.contains(&t.id()) {
                continue;
            }
            // keep the accumulated gradient for non-leaf targets
            let Some(g) = grads.get(&t.id()).cloned() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|i| plan.relevant.contains(&i.id())).collect();
            if !needs.contains(&true) {
                continue;
            }
            let input_grads = node.op.backward(&node.inputs, t, &g, &needs)?;
            for ((input, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                if let (true, Some(ig)) = (*need, ig) {
                    accumulate(&mut grads, input.id(), ig)?;
                }
            }
        }
        Ok(grads)
    })
}

fn check_root(root: &Tensor) -> Result<()> {
    if root.numel() != 1 {
        return Err(Error::NonScalarRoot(root.shape().to_vec()));
    }
    Ok(())
}

fn leaf_gradients(root: &Tensor, create_graph: bool) -> Result<Gradients> {
    check_root(root)?;
    let is_leaf = |t: &Tensor| t.is_leaf() && t.requires_grad();
    let plan = plan(root, &is_leaf, Schedule::Default);
    let mut map = propagate(root, &plan, create_graph)?;
    let leaves: HashSet<u64> = plan.order.iter().filter(|t| is_leaf(t)).map(Tensor::id).collect();
    map.retain(|id, _| leaves.contains(id));
    Ok(Gradients { map })
}

/// Gradients of scalar `root` with respect to every leaf requiring them.
/// The returned tensors are constants.
pub fn backward(root: &Tensor) -> Result<Gradients> {
    leaf_gradients(root, false)
}

/// Like [`backward`], but the returned gradients stay linked to the graph so
/// they can be differentiated again.
pub fn backward_create_graph(root: &Tensor) -> Result<Gradients> {
    leaf_gradients(root, true)
}

/// Gradients of scalar `root` with respect to arbitrary tensors in its graph
/// (leaves or intermediates). Tensors the root does not depend on get zeros.
pub fn grad(root: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    grad_with_schedule(root, wrt, create_graph, Schedule::Default)
}

pub fn grad_with_schedule(root: &Tensor, wrt: &[Tensor], create_graph: bool, schedule: Schedule) -> Result<Vec<Tensor>> {
    check_root(root)?;
    let targets: HashSet<u64> = wrt.iter().map(Tensor::id).collect();
    let plan = plan(root, &|t: &Tensor| targets.contains(&t.id()), schedule);
    let map = propagate(root, &plan, create_graph)?;
    Ok(wrt
        .iter()
        .map(|w| map.get(&w.id()).cloned().unwrap_or_else(|| Tensor::zeros(w.shape())))
        .collect())
}
