//! Patient-grouped, gender-stratified k-fold assignment.
//!
//! Each gender stratum is split on its own and the fold indices are then
//! pooled. Within a stratum patients are placed largest-first into the fold
//! holding the fewest of that stratum's images; remaining ties go to the
//! fold with the fewest images overall, then the lowest fold index. The seed
//! only orders patients of equal size.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::index::{DatasetIndex, Gender};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    pub k: usize,
    /// Fold of each index record, in record order.
    pub fold_of: Vec<usize>,
    pub patients: Vec<BTreeSet<String>>,
    pub warnings: Vec<String>,
}

impl FoldAssignment {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }

    /// Record indices belonging to `fold`.
    pub fn members(&self, fold: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    /// `image_path,fold` CSV in index order.
    pub fn to_csv(&self, index: &DatasetIndex) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image_path", "fold"]).expect("in-memory write");
        for (r, f) in index.records.iter().zip(&self.fold_of) {
            w.write_record([r.image_path.as_str(), &f.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

struct Patient {
    id: String,
    records: Vec<usize>,
}

pub fn kfold_split(index: &DatasetIndex, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("k must be at least 2, got {k}")));
    }
    if index.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty index".into()));
    }

    let mut strata: BTreeMap<Gender, Vec<Patient>> = BTreeMap::new();
    let mut patient_gender: HashMap<&str, (Gender, usize)> = HashMap::new();
    for (ri, r) in index.records.iter().enumerate() {
        match patient_gender.get(r.patient_id.as_str()) {
            Some(&(g, pos)) => {
                if g != r.gender {
                    return Err(Error::Index {
                        row: ri + 1,
                        msg: format!("patient '{}' listed as both {g} and {}", r.patient_id, r.gender),
                    });
                }
                strata.get_mut(&g).expect("stratum exists")[pos].records.push(ri);
            }
            None => {
                let list = strata.entry(r.gender).or_default();
                patient_gender.insert(&r.patient_id, (r.gender, list.len()));
                list.push(Patient {
                    id: r.patient_id.clone(),
                    records: vec![ri],
                });
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![usize::MAX; index.len()];
    let mut patients = vec![BTreeSet::new(); k];
    let mut global = vec![0usize; k];
    let mut warnings = Vec::new();

    for (gender, mut list) in strata {
        if list.len() < k {
            let msg = format!(
                "stratum {gender} has {} patients for {k} folds; some folds get none",
                list.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        list.shuffle(&mut rng);
        list.sort_by(|a, b| b.records.len().cmp(&a.records.len()));
        let mut local = vec![0usize; k];
        for p in list {
            let fold = (0..k)
                .min_by_key(|&f| (local[f], global[f], f))
                .expect("k >= 2");
            local[fold] += p.records.len();
            global[fold] += p.records.len();
            for &ri in &p.records {
                fold_of[ri] = fold;
            }
            patients[fold].insert(p.id);
        }
    }
    debug_assert!(fold_of.iter().all(|&f| f < k));
    Ok(FoldAssignment {
        k,
        fold_of,
        patients,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::index::ImageRecord;
    use proptest::prelude::*;

    pub(crate) fn index_of(patients: &[(Gender, usize)]) -> DatasetIndex {
        let mut records = Vec::new();
        for (p, &(g, n)) in patients.iter().enumerate() {
            for i in 0..n {
                records.push(ImageRecord {
                    image_path: format!("p{p}_{i}.pgm"),
                    patient_id: format!("p{p}"),
                    gender: g,
                    label_path: format!("p{p}_{i}.txt"),
                    annotations: vec![],
                });
            }
        }
        DatasetIndex::from_records(records, 4, ".".into()).unwrap()
    }

    #[test]
    fn one_patient_per_fold() {
        let idx = index_of(&[(Gender::F, 1); 5]);
        let s = kfold_split(&idx, 5, 0).unwrap();
        assert_eq!(s.fold_sizes(), vec![1; 5]);
        assert!(s.patients.iter().all(|p| p.len() == 1));
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn patient_never_spans_folds() {
        let idx = index_of(&[(Gender::M, 3), (Gender::M, 1), (Gender::F, 2)]);
        let s = kfold_split(&idx, 2, 9).unwrap();
        assert!(s.fold_of[0] == s.fold_of[1] && s.fold_of[1] == s.fold_of[2]);
        assert_eq!(s.fold_of[4], s.fold_of[5]);
    }

    #[test]
    fn small_stratum_warns() {
        let idx = index_of(&[(Gender::F, 1), (Gender::F, 1), (Gender::M, 4)]);
        let s = kfold_split(&idx, 3, 1).unwrap();
        assert_eq!(s.warnings.len(), 2);
        assert_eq!(s.fold_sizes().iter().sum::<usize>(), 6);
    }

    #[test]
    fn rejects_bad_arguments() {
        let idx = index_of(&[(Gender::F, 1)]);
        assert!(kfold_split(&idx, 1, 0).is_err());
        let empty = index_of(&[]);
        assert!(kfold_split(&empty, 5, 0).is_err());
    }

    #[test]
    fn conflicting_gender_is_an_error() {
        let mut idx = index_of(&[(Gender::F, 2)]);
        idx.records[1].gender = Gender::M;
        assert!(matches!(kfold_split(&idx, 2, 0), Err(Error::Index { row: 2, .. })));
    }

    #[test]
    fn csv_output() {
        let idx = index_of(&[(Gender::F, 1), (Gender::M, 1)]);
        let s = kfold_split(&idx, 2, 0).unwrap();
        let csv = s.to_csv(&idx);
        assert!(csv.starts_with("image_path,fold\np0_0.pgm,"));
        assert_eq!(csv.lines().count(), 3);
    }

    proptest! {
        #[test]
        fn partition_properties(
            spec in prop::collection::vec((0u8..3, 1usize..5), 1..80),
            k in 2usize..7,
            seed in any::<u64>(),
        ) {
            let patients: Vec<(Gender, usize)> = spec
                .iter()
                .map(|&(g, n)| ([Gender::F, Gender::M, Gender::Unknown][g as usize], n))
                .collect();
            let idx = index_of(&patients);
            let s = kfold_split(&idx, k, seed).unwrap();
            prop_assert_eq!(s.fold_of.len(), idx.len());
            prop_assert!(s.fold_of.iter().all(|&f| f < k));
            // patient-disjoint
            for (i, a) in s.patients.iter().enumerate() {
                for b in &s.patients[i + 1..] {
                    prop_assert!(a.is_disjoint(b));
                }
            }
            let sizes = s.fold_sizes();
            let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
            let largest = patients.iter().map(|p| p.1).max().unwrap();
            prop_assert!(spread <= largest, "sizes {:?} largest {}", sizes, largest);
            prop_assert_eq!(&kfold_split(&idx, k, seed).unwrap(), &s);
        }
    }
}
