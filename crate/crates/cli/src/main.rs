fn main() {
    println!("posegan");
}
