mod common;

#[test]
fn pure_shrinking_drives_selected_salience_to_zero() {
    let r = common::dynamics::run(&common::dynamics::config());
    println!("{r:?}");
    assert!(r.reaches_zero_without_leaks(), "{r:?}");
    assert_eq!(r.first_layer_increases, 0, "{r:?}");
}
