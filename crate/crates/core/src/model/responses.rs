use std::collections::HashMap;

use crate::error::{GrmError, Result};
use crate::model::ItemParameters;

/// Persons × items ordinal responses; `None` marks a missing entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    domain: String,
    person_ids: Vec<String>,
    item_ids: Vec<String>,
    categories: Vec<usize>,
    entries: Vec<Option<u8>>,
}

impl ResponseMatrix {
    /// Builds a matrix from row-major entries, checking shapes and category ranges.
    pub fn new(
        domain: impl Into<String>,
        person_ids: Vec<String>,
        item_ids: Vec<String>,
        categories: Vec<usize>,
        entries: Vec<Option<u8>>,
    ) -> Result<Self> {
        let (p, i) = (person_ids.len(), item_ids.len());
        if categories.len() != i {
            return Err(GrmError::InvalidResponses(format!(
                "{} category counts for {} items",
                categories.len(),
                i
            )));
        }
        if entries.len() != p * i {
            return Err(GrmError::InvalidResponses(format!(
                "expected {} entries for {p}x{i}, got {}",
                p * i,
                entries.len()
            )));
        }
        if let Some(c) = categories.iter().find(|&&c| !(2..=256).contains(&c)) {
            return Err(GrmError::InvalidResponses(format!(
                "items need between 2 and 256 categories, got {c}"
            )));
        }
        for (k, x) in entries.iter().enumerate() {
            if let Some(x) = x {
                let item = k % i.max(1);
                if *x as usize >= categories[item] {
                    return Err(GrmError::InvalidResponses(format!(
                        "person `{}` item `{}`: category {x} outside 0..{}",
                        person_ids[k / i],
                        item_ids[item],
                        categories[item]
                    )));
                }
            }
        }
        Ok(ResponseMatrix {
            domain: domain.into(),
            person_ids,
            item_ids,
            categories,
            entries,
        })
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn persons(&self) -> usize {
        self.person_ids.len()
    }

    pub fn items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn person_ids(&self) -> &[String] {
        &self.person_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    /// Category count `J_i` of every item.
    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    pub fn row(&self, p: usize) -> &[Option<u8>] {
        let i = self.items();
        &self.entries[p * i..(p + 1) * i]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Option<u8>]> {
        (0..self.persons()).map(move |p| self.row(p))
    }

    pub fn get(&self, p: usize, i: usize) -> Option<u8> {
        self.entries[p * self.items() + i]
    }

    pub fn observed(&self) -> usize {
        self.entries.iter().filter(|x| x.is_some()).count()
    }

    /// Persons whose rows contain no observed response.
    pub fn empty_persons(&self) -> Vec<usize> {
        (0..self.persons())
            .filter(|&p| self.row(p).iter().all(Option::is_none))
            .collect()
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = domain.into();
        self
    }

    /// Rows for the given persons, in the given order.
    pub fn subset_persons(&self, persons: &[usize]) -> ResponseMatrix {
        let mut entries = Vec::with_capacity(persons.len() * self.items());
        for &p in persons {
            entries.extend_from_slice(self.row(p));
        }
        ResponseMatrix {
            domain: self.domain.clone(),
            person_ids: persons.iter().map(|&p| self.person_ids[p].clone()).collect(),
            item_ids: self.item_ids.clone(),
            categories: self.categories.clone(),
            entries,
        }
    }

    /// Columns for the given item indices, in the given order.
    pub fn subset_items(&self, items: &[usize]) -> ResponseMatrix {
        let mut entries = Vec::with_capacity(self.persons() * items.len());
        for p in 0..self.persons() {
            let row = self.row(p);
            entries.extend(items.iter().map(|&i| row[i]));
        }
        ResponseMatrix {
            domain: self.domain.clone(),
            person_ids: self.person_ids.clone(),
            item_ids: items.iter().map(|&i| self.item_ids[i].clone()).collect(),
            categories: items.iter().map(|&i| self.categories[i]).collect(),
            entries,
        }
    }

    /// Reorders/selects columns to match an item bank by id and checks that
    /// every response fits the item's category count.
    pub fn align_to(&self, items: &ItemParameters) -> Result<ResponseMatrix> {
        let index: HashMap<&str, usize> = self
            .item_ids
            .iter()
            .enumerate()
            .map(|(k, id)| (id.as_str(), k))
            .collect();
        let cols = items
            .iter()
            .map(|it| {
                index.get(it.id.as_str()).copied().ok_or_else(|| {
                    GrmError::InvalidResponses(format!("item `{}` not present in responses", it.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = self.subset_items(&cols);
        for (k, it) in items.iter().enumerate() {
            let j = it.categories();
            for p in 0..out.persons() {
                if let Some(x) = out.get(p, k) {
                    if x as usize >= j {
                        return Err(GrmError::InvalidResponses(format!(
                            "person `{}` item `{}`: category {x} outside 0..{j}",
                            out.person_ids[p], it.id
                        )));
                    }
                }
            }
            out.categories[k] = j;
        }
        Ok(out)
    }

    /// Count of observed responses per category for item `i`.
    pub fn category_counts(&self, i: usize) -> Vec<usize> {
        let mut counts = vec![0; self.categories[i]];
        for p in 0..self.persons() {
            if let Some(x) = self.get(p, i) {
                counts[x as usize] += 1;
            }
        }
        counts
    }
}
