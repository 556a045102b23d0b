//! Thread-local operation counters used to compare the inference cost of
//! model variants structurally (by counting executed stages).

use std::cell::RefCell;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Op {
    Conv,
    Pool,
    Linear,
    IpOp,
    Normalize,
    Head,
}

thread_local! {
    static COUNTS: RefCell<Option<BTreeMap<Op, u64>>> = const { RefCell::new(None) };
}

pub(crate) fn hit(op: Op) {
    COUNTS.with(|c| {
        if let Some(map) = c.borrow_mut().as_mut() {
            *map.entry(op).or_insert(0) += 1;
        }
    });
}

/// Runs `f` with counting enabled on this thread and returns its result
/// together with the executed operation counts.
pub fn count<T>(f: impl FnOnce() -> T) -> (T, BTreeMap<Op, u64>) {
    let previous = COUNTS.with(|c| c.borrow_mut().replace(BTreeMap::new()));
    let out = f();
    let counts = COUNTS.with(|c| std::mem::replace(&mut *c.borrow_mut(), previous));
    (out, counts.unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_only_inside_scope() {
        hit(Op::Conv);
        let ((), counts) = count(|| {
            hit(Op::Conv);
            hit(Op::Conv);
            hit(Op::Head);
        });
        assert_eq!(counts.get(&Op::Conv), Some(&2));
        assert_eq!(counts.get(&Op::Head), Some(&1));
        assert_eq!(counts.get(&Op::Pool), None);
    }
}
