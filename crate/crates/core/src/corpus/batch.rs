use super::{IdTree, Node, EOS, PAD};
use crate::error::{Error, Result};

/// One position of a padded child sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Token id at the token level, otherwise the index of the child's own
    /// sequence in the level below.
    Item(usize),
    Eos,
    Pad,
}

/// All child sequences of one level, each padded to `cap` slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelBatch {
    pub cap: usize,
    pub slots: Vec<Slot>,
    /// Real children plus the EoS slot.
    pub lengths: Vec<usize>,
    /// Document index of every sequence.
    pub document: Vec<usize>,
}

impl LevelBatch {
    pub fn sequences(&self) -> usize {
        self.lengths.len()
    }

    pub fn sequence(&self, s: usize) -> &[Slot] {
        &self.slots[s * self.cap..(s + 1) * self.cap]
    }

    /// `true` exactly on pad slots.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.slots.iter().map(|s| *s == Slot::Pad).collect()
    }

    pub fn valid(&self) -> Vec<bool> {
        self.slots.iter().map(|s| *s != Slot::Pad).collect()
    }

    /// Slot positions holding real children.
    pub fn item_positions(&self) -> Vec<usize> {
        (0..self.slots.len())
            .filter(|&i| matches!(self.slots[i], Slot::Item(_)))
            .collect()
    }

    /// Token level: ids with `EOS`/`PAD` in the special slots.
    pub fn token_ids(&self) -> Vec<usize> {
        self.slots
            .iter()
            .map(|s| match *s {
                Slot::Item(id) => id,
                Slot::Eos => EOS,
                Slot::Pad => PAD,
            })
            .collect()
    }
}

/// Padded id arrays for a group of documents. `levels[0]` holds the token
/// sequences of sentences; the last level holds one sequence per document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub documents: usize,
    pub levels: Vec<LevelBatch>,
}

impl Batch {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Number of level-`k` vectors (sequences of level `k - 1`); level 0 is
    /// the number of token slots.
    pub fn count(&self, k: usize) -> usize {
        if k == 0 {
            self.levels[0].slots.len()
        } else {
            self.levels[k - 1].sequences()
        }
    }

    pub fn from_trees(trees: &[&IdTree], caps: &[usize]) -> Result<Self> {
        let depth = caps.len();
        if let Some(&c) = caps.iter().find(|&&c| c < 2) {
            return Err(Error::Config(format!(
                "cap {c} leaves no room for content and EoS"
            )));
        }
        let mut levels: Vec<LevelBatch> = caps
            .iter()
            .map(|&cap| LevelBatch {
                cap,
                slots: Vec::new(),
                lengths: Vec::new(),
                document: Vec::new(),
            })
            .collect();
        for (d, tree) in trees.iter().enumerate() {
            if tree.depth() != depth {
                return Err(Error::Config(format!(
                    "document of depth {} with {depth} configured caps",
                    tree.depth()
                )));
            }
            add(&mut levels, &tree.root, depth, d);
        }
        Ok(Self {
            documents: trees.len(),
            levels,
        })
    }
}

fn add(levels: &mut [LevelBatch], node: &Node<usize>, height: usize, doc: usize) -> usize {
    let k = height - 1;
    let cap = levels[k].cap;
    let children = &node.children()[..node.children().len().min(cap - 1)];
    let mut seq = Vec::with_capacity(cap);
    for c in children {
        seq.push(match c {
            Node::Leaf(id) => Slot::Item(*id),
            Node::Branch(_) => Slot::Item(add(levels, c, k, doc)),
        });
    }
    seq.push(Slot::Eos);
    let len = seq.len();
    seq.resize(cap, Slot::Pad);
    let l = &mut levels[k];
    l.slots.extend(seq);
    l.lengths.push(len);
    l.document.push(doc);
    l.lengths.len() - 1
}

/// Groups documents in input order into batches of at most `batch_size`.
pub fn make_batches(trees: &[IdTree], caps: &[usize], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    trees
        .chunks(batch_size)
        .map(|chunk| Batch::from_trees(&chunk.iter().collect::<Vec<_>>(), caps))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{level_names, Tree};
    use proptest::prelude::*;

    fn tree(sentences: &[&[usize]]) -> IdTree {
        let s = sentences
            .iter()
            .map(|ids| Node::Branch(ids.iter().map(|&i| Node::Leaf(i)).collect()))
            .collect();
        Tree::new(level_names(3), Node::Branch(vec![Node::Branch(s)])).unwrap()
    }

    #[test]
    fn pads_after_eos() {
        let b = Batch::from_trees(&[&tree(&[&[10, 11, 12]])], &[6, 4, 4]).unwrap();
        assert_eq!(b.levels[0].token_ids(), vec![10, 11, 12, EOS, PAD, PAD]);
        assert_eq!(b.levels[0].lengths, vec![4]);
    }

    #[test]
    fn truncates_to_cap() {
        let b =
            Batch::from_trees(&[&tree(&[&[4, 5, 6, 7, 8, 9, 10, 11, 12]])], &[6, 4, 4]).unwrap();
        assert_eq!(b.levels[0].token_ids(), vec![4, 5, 6, 7, 8, EOS]);
        assert_eq!(b.levels[0].lengths, vec![6]);
    }

    #[test]
    fn batch_sizes() {
        let docs: Vec<IdTree> = (0..5).map(|i| tree(&[&[i + 4]])).collect();
        let sizes: Vec<usize> = make_batches(&docs, &[4, 4, 4], 2)
            .unwrap()
            .iter()
            .map(|b| b.documents)
            .collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn higher_slots_point_at_child_sequences() {
        let b = Batch::from_trees(&[&tree(&[&[4], &[5, 6]])], &[4, 4, 4]).unwrap();
        assert_eq!(
            b.levels[1].sequence(0),
            &[Slot::Item(0), Slot::Item(1), Slot::Eos, Slot::Pad]
        );
        assert_eq!(
            b.levels[2].sequence(0),
            &[Slot::Item(0), Slot::Eos, Slot::Pad, Slot::Pad]
        );
        assert_eq!(b.count(1), 2);
    }

    #[test]
    fn rejects_small_caps() {
        assert!(Batch::from_trees(&[&tree(&[&[4]])], &[1, 4, 4]).is_err());
    }

    fn arb_doc() -> impl Strategy<Value = IdTree> {
        let sentence = proptest::collection::vec((4usize..20).prop_map(Node::Leaf), 1..12)
            .prop_map(Node::Branch);
        let paragraph = proptest::collection::vec(sentence, 1..7).prop_map(Node::Branch);
        proptest::collection::vec(paragraph, 1..7)
            .prop_map(|p| Tree::new(level_names(3), Node::Branch(p)).unwrap())
    }

    proptest! {
        #[test]
        fn lengths_match_masks(docs in proptest::collection::vec(arb_doc(), 1..5), bs in 1usize..4) {
            let batches = make_batches(&docs, &[6, 4, 3], bs).unwrap();
            let again = make_batches(&docs, &[6, 4, 3], bs).unwrap();
            prop_assert_eq!(&batches, &again);
            for b in &batches {
                for l in &b.levels {
                    for s in 0..l.sequences() {
                        let seq = l.sequence(s);
                        let real = seq.iter().filter(|x| **x != Slot::Pad).count();
                        prop_assert_eq!(real, l.lengths[s]);
                        prop_assert!(l.lengths[s] <= l.cap);
                        prop_assert_eq!(seq.iter().filter(|x| **x == Slot::Eos).count(), 1);
                        prop_assert_eq!(seq[l.lengths[s] - 1], Slot::Eos);
                    }
                }
            }
        }
    }
}
