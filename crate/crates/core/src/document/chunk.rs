use super::{Collection, Document, DocumentError};

/// One storage chunk of a collection. `file_index` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct DataFile {
    pub file_index: usize,
    pub docs: Vec<Document>,
}

/// Splits `items` into `ceil(len / s)` consecutive runs of `s`; the last run
/// holds `len % s` items, or `s` when `s` divides `len`.
pub fn chunk_items<T: Clone>(items: &[T], s: usize) -> Result<Vec<Vec<T>>, DocumentError> {
    if s == 0 {
        return Err(DocumentError::Argument("chunk size must be at least 1".into()));
    }
    Ok(items.chunks(s).map(<[T]>::to_vec).collect())
}

pub fn chunk(collection: &Collection, s: usize) -> Result<Vec<DataFile>, DocumentError> {
    Ok(chunk_items(collection.docs(), s)?
        .into_iter()
        .enumerate()
        .map(|(k, docs)| DataFile { file_index: k + 1, docs })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collection(r: usize) -> Collection {
        let docs = (0..r as i64).map(|i| Document::new().with("A", i)).collect();
        Collection::named("C", docs).unwrap()
    }

    fn sizes(r: usize, s: usize) -> Vec<usize> {
        chunk(&collection(r), s).unwrap().iter().map(|f| f.docs.len()).collect()
    }

    #[test]
    fn file_sizes() {
        assert_eq!(sizes(7, 3), vec![3, 3, 1]);
        assert_eq!(sizes(6, 3), vec![3, 3]);
        assert!(sizes(0, 3).is_empty());
    }

    #[test]
    fn indices_are_one_based_and_concatenation_is_identity() {
        let c = collection(10);
        let files = chunk(&c, 4).unwrap();
        assert_eq!(files.iter().map(|f| f.file_index).collect::<Vec<_>>(), vec![1, 2, 3]);
        let joined: Vec<Document> = files.into_iter().flat_map(|f| f.docs).collect();
        assert_eq!(joined, c.docs());
    }

    #[test]
    fn zero_chunk_size_is_rejected() {
        assert!(matches!(chunk(&collection(3), 0), Err(DocumentError::Argument(_))));
    }
}
