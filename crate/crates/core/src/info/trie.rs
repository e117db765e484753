use std::collections::HashMap;

#[derive(Debug, Clone)]
struct Node<V> {
    children: HashMap<String, usize>,
    value: Option<V>,
}

impl<V> Default for Node<V> {
    fn default() -> Self {
        Self {
            children: HashMap::new(),
            value: None,
        }
    }
}

/// Token-level trie mapping lemma phrases to values.
#[derive(Debug, Clone)]
pub struct PhraseTrie<V> {
    nodes: Vec<Node<V>>,
    len: usize,
}

impl<V> Default for PhraseTrie<V> {
    fn default() -> Self {
        Self {
            nodes: vec![Node::default()],
            len: 0,
        }
    }
}

impl<V> PhraseTrie<V> {
    /// Inserts `phrase`, returning the previous value if the phrase existed.
    pub fn insert<S: AsRef<str>>(&mut self, phrase: &[S], value: V) -> Option<V> {
        let mut at = 0;
        for tok in phrase {
            let tok = tok.as_ref();
            at = match self.nodes[at].children.get(tok) {
                Some(&next) => next,
                None => {
                    self.nodes.push(Node::default());
                    let next = self.nodes.len() - 1;
                    self.nodes[at].children.insert(tok.to_string(), next);
                    next
                }
            };
        }
        let old = self.nodes[at].value.replace(value);
        if old.is_none() {
            self.len += 1;
        }
        old
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// All phrases that match `tokens` starting at `start`, shortest first,
    /// as `(length, value)`.
    pub fn matches_at<'a, S: AsRef<str>>(&'a self, tokens: &[S], start: usize) -> Vec<(usize, &'a V)> {
        let mut out = Vec::new();
        let mut at = 0;
        for (offset, tok) in tokens[start.min(tokens.len())..].iter().enumerate() {
            match self.nodes[at].children.get(tok.as_ref()) {
                Some(&next) => at = next,
                None => break,
            }
            if let Some(v) = &self.nodes[at].value {
                out.push((offset + 1, v));
            }
        }
        out
    }

    pub fn longest_at<S: AsRef<str>>(&self, tokens: &[S], start: usize) -> Option<(usize, &V)> {
        self.matches_at(tokens, start).pop()
    }

    /// Greedy left-to-right longest-match scan; matched tokens are consumed.
    pub fn scan<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<(usize, usize, &V)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            match self.longest_at(tokens, i) {
                Some((len, v)) => {
                    out.push((i, i + len, v));
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn longest_wins_and_consumes() {
        let mut t = PhraseTrie::default();
        t.insert(&["consolidation"], 1);
        t.insert(&["focal", "consolidation"], 2);
        t.insert(&["focal"], 3);
        let toks = ["focal", "consolidation", "is", "focal"];
        let got: Vec<_> = t.scan(&toks).into_iter().map(|(s, e, v)| (s, e, *v)).collect();
        assert_eq!(got, vec![(0, 2, 2), (3, 4, 3)]);
        assert_eq!(t.len(), 3);
        assert_eq!(t.insert(&["focal"], 4), Some(3));
        assert_eq!(t.len(), 3);
    }
}
