use forge_core::container::{
    decode_embeddings, decode_matrix, read_embeddings, read_matrix, write_embeddings, write_matrix, EmbeddingFile,
    MatrixFile,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_file(n: usize, dim: usize, seed: u64) -> EmbeddingFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingFile {
        dim,
        entries: (0..n)
            .map(|i| {
                // Raw bit patterns cover subnormals and signed zeros.
                let v = (0..dim)
                    .map(|_| loop {
                        let f = f32::from_bits(rng.random());
                        if f.is_finite() {
                            break f;
                        }
                    })
                    .collect();
                (format!("clip-{i}-ü"), v)
            })
            .collect(),
    }
}

#[test]
fn thousand_vectors_round_trip_bit_exact() {
    let file = random_file(1000, 48, 3);
    let mut buf = Vec::new();
    write_embeddings(&file, &mut buf).unwrap();

    let header = 12;
    let per_entry: usize = file.entries.iter().map(|(id, _)| 2 + id.len() + 48 * 4).sum();
    assert_eq!(buf.len(), header + per_entry);
    assert_eq!(&buf[..4], b"EMB1");
    assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 48);
    assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1000);

    let back = read_embeddings(buf.as_slice()).unwrap();
    assert_eq!(back.dim, file.dim);
    assert_eq!(back.entries.len(), 1000);
    for ((a, va), (b, vb)) in file.entries.iter().zip(&back.entries) {
        assert_eq!(a, b);
        assert!(va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn first_entry_layout() {
    let file = EmbeddingFile {
        dim: 2,
        entries: vec![("ab".into(), vec![1.0, -2.5])],
    };
    let mut buf = Vec::new();
    write_embeddings(&file, &mut buf).unwrap();
    let mut want = b"EMB1".to_vec();
    want.extend(2u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(2u16.to_le_bytes());
    want.extend(b"ab");
    want.extend(1.0f32.to_le_bytes());
    want.extend((-2.5f32).to_le_bytes());
    assert_eq!(buf, want);
}

#[test]
fn corrupt_embedding_files_are_rejected() {
    let mut buf = Vec::new();
    write_embeddings(&random_file(3, 4, 1), &mut buf).unwrap();
    let mut bad_magic = buf.clone();
    bad_magic[0] = b'X';
    assert!(decode_embeddings(&bad_magic).is_err());
    let mut trailing = buf.clone();
    trailing.push(0);
    assert!(decode_embeddings(&trailing).is_err());
    assert!(decode_embeddings(&buf[..buf.len() - 1]).is_err());
    assert!(decode_embeddings(&[]).is_err());
}

#[test]
fn matrix_round_trip_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (rows, cols) = (1000, 17);
    let m = MatrixFile {
        rows,
        cols,
        values: (0..rows * cols).map(|_| rng.random_range(-1e6f32..1e6)).collect(),
    };
    let mut buf = Vec::new();
    write_matrix(&m, &mut buf).unwrap();
    assert_eq!(&buf[..4], b"MAT1");
    let back = read_matrix(buf.as_slice()).unwrap();
    assert_eq!((back.rows, back.cols), (rows, cols));
    assert!(m.values.iter().zip(&back.values).all(|(a, b)| a.to_bits() == b.to_bits()));

    buf.push(1);
    assert!(decode_matrix(&buf).is_err());
}
