//! Model building blocks: the causal self-attention encoder and the 2D-LSTM
//! grid with its execution schedules.

pub mod encoder;
pub mod grid;
pub mod kernels;

/// How grid states along one axis are reduced to a single vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Max,
    Average,
    Last,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Pooling::Max),
            "avg" | "average" => Ok(Pooling::Average),
            "last" => Ok(Pooling::Last),
            other => Err(format!("unknown pooling mode `{other}` (expected max, avg or last)")),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Average => "avg",
            Pooling::Last => "last",
        })
    }
}

impl Pooling {
    /// Reduces `members` (in axis order) to one vector. Matches the taped
    /// grid pooling bit for bit.
    pub fn pool<T: crate::Scalar>(self, members: &[&[T]]) -> Vec<T> {
        let dc = members[0].len();
        match self {
            Pooling::Max => {
                let mut out = members[0].to_vec();
                for m in &members[1..] {
                    for (o, &x) in out.iter_mut().zip(m.iter()) {
                        if x > *o {
                            *o = x;
                        }
                    }
                }
                out
            }
            Pooling::Average => {
                let mut out = vec![T::zero(); dc];
                for m in members {
                    for (o, &x) in out.iter_mut().zip(m.iter()) {
                        *o = *o + x;
                    }
                }
                let n = T::from_usize(members.len()).unwrap();
                out.iter_mut().for_each(|x| *x = *x / n);
                out
            }
            Pooling::Last => members[members.len() - 1].to_vec(),
        }
    }
}
