//! Saves a teacher, reloads it and shows how corruption is reported.

use pcdl::artifact::{read_teacher, teacher_checkpoint};
use pcdl::checkpoint::Checkpoint;
use pcdl::teacher::{TeacherBundle, TeacherConfig};

fn main() -> pcdl::Result<()> {
    let teacher = TeacherBundle::train(&TeacherConfig::default(), 0)?;
    let path = std::env::temp_dir().join("teacher-example.pcdl");
    teacher_checkpoint(&teacher)?.save(&path)?;

    let ck = Checkpoint::load(&path)?;
    let back = read_teacher(&ck)?;
    println!("{} entries, weights identical: {}", ck.entries.len(), back.eps_net == teacher.eps_net);

    let bytes = std::fs::read(&path)?;
    let mut magic = bytes.clone();
    magic[0] ^= 1;
    println!("flipped magic: {}", Checkpoint::from_bytes(&magic).unwrap_err());
    println!("truncated: {}", Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err());
    Ok(())
}
