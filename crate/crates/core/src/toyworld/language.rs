use std::collections::BTreeSet;

use super::Task;
use crate::numerics::Rng;

/// Instruction rephrasal family. Only `Seen` appears in training data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Seen,
    UnseenNoun,
    UnseenVerb,
    UnseenNounVerb,
    Human,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Seen,
        Family::UnseenNoun,
        Family::UnseenVerb,
        Family::UnseenNounVerb,
        Family::Human,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Seen => "seen",
            Family::UnseenNoun => "unseen_noun",
            Family::UnseenVerb => "unseen_verb",
            Family::UnseenNounVerb => "unseen_noun_verb",
            Family::Human => "human",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == s)
    }
}

struct Slots {
    verb: &'static str,
    verb_alt: &'static [&'static str],
    /// Words before the noun that identify the object (colour).
    adj: &'static [&'static str],
    noun: &'static str,
    noun_alt: &'static [&'static str],
    tail: &'static [&'static str],
    human: &'static [&'static str],
}

fn slots(task: Task) -> Slots {
    match task {
        Task::CloseDrawer => Slots {
            verb: "close",
            verb_alt: &["shut", "seal"],
            adj: &[],
            noun: "drawer",
            noun_alt: &["container", "cabinet"],
            tail: &[],
            human: &[
                "please make the drawer fully closed",
                "can you close the drawer",
                "push the drawer in",
            ],
        },
        Task::OpenDrawer => Slots {
            verb: "open",
            verb_alt: &["pull", "extend"],
            adj: &[],
            noun: "drawer",
            noun_alt: &["container", "cabinet"],
            tail: &[],
            human: &[
                "please make the drawer fully open",
                "can you open the drawer",
                "pull the drawer out",
            ],
        },
        Task::FaucetLeft => Slots {
            verb: "turn",
            verb_alt: &["rotate", "twist"],
            adj: &[],
            noun: "faucet",
            noun_alt: &["tap", "spigot"],
            tail: &["left"],
            human: &[
                "please rotate the faucet to the left",
                "twist the tap towards the left",
                "turn the faucet so it points left",
            ],
        },
        Task::FaucetRight => Slots {
            verb: "turn",
            verb_alt: &["rotate", "twist"],
            adj: &[],
            noun: "faucet",
            noun_alt: &["tap", "spigot"],
            tail: &["right"],
            human: &[
                "please rotate the faucet to the right",
                "twist the tap towards the right",
                "turn the faucet so it points right",
            ],
        },
        Task::BlackMugRight => Slots {
            verb: "move",
            verb_alt: &["push", "shift"],
            adj: &["black"],
            noun: "mug",
            noun_alt: &["cup", "glass"],
            tail: &["right"],
            human: &[
                "please push the black mug to the right",
                "slide the dark cup rightwards",
                "move the black mug over to the right",
            ],
        },
        Task::WhiteMugDown => Slots {
            verb: "move",
            verb_alt: &["push", "shift"],
            adj: &["white"],
            noun: "mug",
            noun_alt: &["cup", "glass"],
            tail: &["down"],
            human: &[
                "please push the white mug down",
                "slide the pale cup downwards",
                "move the white mug toward the bottom",
            ],
        },
    }
}

fn template(verb: &str, s: &Slots, noun: &str, article: bool) -> String {
    let mut words = vec![verb];
    if article {
        words.push("the");
    }
    words.extend(s.adj);
    words.push(noun);
    words.extend(s.tail);
    words.join(" ")
}

/// Every surface form of `task` in `family`, in a fixed order.
pub fn surface_forms(task: Task, family: Family) -> Vec<String> {
    let s = slots(task);
    let verbs: Vec<&str> = match family {
        Family::Seen | Family::UnseenNoun => vec![s.verb],
        _ => s.verb_alt.to_vec(),
    };
    let nouns: Vec<&str> = match family {
        Family::Seen | Family::UnseenVerb => vec![s.noun],
        _ => s.noun_alt.to_vec(),
    };
    if family == Family::Human {
        return s.human.iter().map(|h| h.to_string()).collect();
    }
    let mut out = Vec::new();
    for v in &verbs {
        for n in &nouns {
            for article in [false, true] {
                out.push(template(v, &s, n, article));
            }
        }
    }
    out
}

/// Uniformly drawn surface form, as lowercase tokens.
pub fn sample_instruction(task: Task, family: Family, rng: &mut Rng) -> Vec<String> {
    let forms = surface_forms(task, family);
    crate::encoders::tokenize(&forms[rng.below(forms.len())])
}

/// Every token any family can produce.
pub fn lexicon() -> BTreeSet<String> {
    let mut words = BTreeSet::new();
    for task in Task::ALL {
        for family in Family::ALL {
            for form in surface_forms(task, family) {
                words.extend(crate::encoders::tokenize(&form));
            }
        }
    }
    words
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seen_close_drawer() {
        assert_eq!(surface_forms(Task::CloseDrawer, Family::Seen)[0], "close drawer");
    }

    #[test]
    fn every_cell_has_two_forms() {
        for t in Task::ALL {
            for f in Family::ALL {
                let forms: BTreeSet<_> = surface_forms(t, f).into_iter().collect();
                assert!(forms.len() >= 2, "{t:?} {f:?}");
            }
        }
    }
}
