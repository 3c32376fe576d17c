//! Builds a hint set, writes it as the versioned JSON document shared with
//! the studio UI and reads it back.

use manga_colorize::data::{load_hints, save_hints, Hint, HintSet};

fn main() -> manga_colorize::Result<()> {
    let hints = HintSet::new(
        512,
        768,
        vec![
            Hint {
                x: 120,
                y: 200,
                color: [0.93, 0.76, 0.62],
                radius: 12,
            },
            Hint {
                x: 300,
                y: 90,
                color: [0.15, 0.2, 0.55],
                radius: 20,
            },
        ],
    )?;
    let doc = save_hints(&hints);
    println!("{doc}");
    let back = load_hints(&doc)?;
    assert_eq!(back, hints);
    println!("digest {}", back.digest());

    let out_of_bounds = Hint {
        x: 512,
        y: 0,
        color: [1.0, 0.0, 0.0],
        radius: 4,
    };
    match HintSet::new(512, 768, vec![out_of_bounds]) {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!("x == width is outside the page"),
    }
    Ok(())
}
